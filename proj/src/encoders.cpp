// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/encoders.hpp"

#include <cmath>
#include <string>

#include "dualfed/rng.hpp"

namespace dualfed {

EncoderStack::EncoderStack(std::vector<LoraLinear> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ShapeError("EncoderStack: no layers");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in_dim() != layers_[i - 1].out_dim()) {
      throw ShapeError("EncoderStack: layer " + std::to_string(i) + " input dim " +
                       std::to_string(layers_[i].in_dim()) + " does not chain with output dim " +
                       std::to_string(layers_[i - 1].out_dim()));
    }
  }
}

bool EncoderStack::trainable() const {
  for (const auto& l : layers_) {
    if (l.trainable()) return true;
  }
  return false;
}

Matrix EncoderStack::forward(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = lora_forward(layers_[i], h);
    if (i + 1 < layers_.size()) h = h.array().tanh().matrix();
  }
  return h;
}

std::vector<Tape::Var> EncoderStack::register_lora(Tape& tape) const {
  std::vector<Tape::Var> leaves;
  for (const auto& l : layers_) {
    if (!l.trainable()) continue;
    leaves.push_back(tape.parameter(l.a));
    leaves.push_back(tape.parameter(l.b));
  }
  return leaves;
}

Tape::Var EncoderStack::forward(Tape& tape, Tape::Var x,
                                const std::vector<Tape::Var>& lora_leaves) const {
  Tape::Var h = x;
  std::size_t leaf = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LoraLinear& l = layers_[i];
    Tape::Var out = tape.matmul(tape.constant(l.w0), h);
    if (l.trainable()) {
      if (leaf + 2 > lora_leaves.size()) throw ShapeError("EncoderStack: missing LoRA leaves");
      const Tape::Var a = lora_leaves[leaf];
      const Tape::Var b = lora_leaves[leaf + 1];
      leaf += 2;
      out = tape.add(out, tape.matmul(b, tape.matmul(a, h)));
    }
    h = (i + 1 < layers_.size()) ? tape.tanh(out) : out;
  }
  if (leaf != lora_leaves.size()) throw ShapeError("EncoderStack: unused LoRA leaves");
  return h;
}

LoraDelta EncoderStack::lora() const {
  std::vector<LoraDelta::Factors> factors;
  for (const auto& l : layers_) {
    if (l.trainable()) factors.push_back({l.a, l.b});
  }
  return LoraDelta(std::move(factors));
}

void EncoderStack::set_lora(const LoraDelta& delta) {
  lora().require_same_shape(delta, "EncoderStack::set_lora");
  std::size_t k = 0;
  for (auto& l : layers_) {
    if (!l.trainable()) continue;
    l.a = delta[k].a;
    l.b = delta[k].b;
    ++k;
  }
}

std::vector<Matrix*> EncoderStack::lora_parameters() {
  std::vector<Matrix*> out;
  for (auto& l : layers_) {
    if (!l.trainable()) continue;
    out.push_back(&l.a);
    out.push_back(&l.b);
  }
  return out;
}

ClassTextBank::ClassTextBank(std::uint64_t seed, int num_classes, Eigen::Index dim)
    : vectors_(dim, num_classes) {
  if (num_classes < 1 || dim < 1) throw ShapeError("ClassTextBank: empty bank");
  for (int c = 0; c < num_classes; ++c) {
    Rng rng = make_rng({seed, key(Stream::kClassBank), static_cast<std::uint64_t>(c)});
    Vector v = gaussian_matrix(rng, dim, 1, 1.0);
    vectors_.col(c) = v / v.norm();
  }
}

Vector ClassTextBank::raw(int class_id) const {
  if (class_id < 0 || class_id >= num_classes()) {
    throw std::out_of_range("ClassTextBank: unknown class " + std::to_string(class_id));
  }
  return vectors_.col(class_id);
}

Matrix ClassTextBank::columns(const std::vector<int>& class_ids) const {
  Matrix out(dim(), static_cast<Eigen::Index>(class_ids.size()));
  for (std::size_t i = 0; i < class_ids.size(); ++i) out.col(i) = raw(class_ids[i]);
  return out;
}

Vector encode_image(const EncoderStack& enc, const Vector& x, const std::optional<Vector>& noise) {
  if (x.size() != enc.input_dim()) throw ShapeError("encode_image: feature length mismatch");
  Vector z = enc.forward(x);
  if (noise) {
    if (noise->size() != z.size()) throw ShapeError("encode_image: noise length mismatch");
    z += *noise;
  }
  const double n = z.norm();
  if (!(n >= 1e-12)) throw NumericError("encode_image: degenerate latent");
  return z / n;
}

Matrix encode_images(const EncoderStack& enc, const Matrix& x, const Matrix& noise) {
  Matrix z = enc.forward(x);
  if (noise.size() != 0) {
    if (noise.rows() != z.rows() || noise.cols() != z.cols()) {
      throw ShapeError("encode_images: noise shape mismatch");
    }
    z += noise;
  }
  return normalize_columns(z);
}

Vector encode_text(const EncoderStack& enc, const ClassTextBank& bank, int class_id) {
  return encode_image(enc, bank.raw(class_id));
}

Matrix encode_all_text(const EncoderStack& enc, const ClassTextBank& bank) {
  return normalize_columns(enc.forward(bank.matrix()));
}

Vector class_probabilities(const Vector& image_embedding, const Matrix& text_embeddings,
                           double tau) {
  if (image_embedding.size() != text_embeddings.rows()) {
    throw ShapeError("class_probabilities: embedding dimension mismatch");
  }
  return softmax_with_temperature(text_embeddings.transpose() * image_embedding, tau);
}

namespace {

EncoderStack near_identity_stack(Rng& rng, const ModelDims& dims, double perturbation) {
  const Eigen::Index d = dims.embed_dim;
  if (dims.lora_rank < 0 || 2 * dims.lora_rank > d) {
    throw ConfigError("LoRA rank must satisfy 0 <= r <= min(d1, d2) / 2");
  }
  std::vector<LoraLinear> layers;
  for (int i = 0; i < dims.layers; ++i) {
    Matrix w0 = Matrix::Identity(d, d);
    if (perturbation > 0.0) w0 += gaussian_matrix(rng, d, d, perturbation);
    const Eigen::Index rank = (i >= dims.lora_start) ? dims.lora_rank : 0;
    LoraLinear layer(std::move(w0), rank);
    if (rank > 0) layer.a = gaussian_matrix(rng, rank, d, 1.0 / std::sqrt(double(d)));
    layers.push_back(std::move(layer));
  }
  return EncoderStack(std::move(layers));
}

}  // namespace

DualEncoder init_pretrained_like(std::uint64_t seed, const ModelDims& dims, double tau,
                                 double perturbation) {
  if (dims.input_dim != dims.embed_dim || dims.text_dim != dims.embed_dim) {
    throw ConfigError("near-identity init requires input_dim == text_dim == embed_dim");
  }
  if (dims.layers < 1) throw ConfigError("encoder needs at least one layer");
  if (dims.lora_start < 0 || dims.lora_start >= dims.layers) {
    throw ConfigError("LoRA start layer must index an existing layer");
  }
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  Rng image_rng = make_rng({seed, key(Stream::kInit), 0});
  Rng text_rng = make_rng({seed, key(Stream::kInit), 1});
  DualEncoder model;
  model.image = near_identity_stack(image_rng, dims, perturbation);
  model.text = near_identity_stack(text_rng, dims, perturbation);
  model.tau = tau;
  return model;
}

}  // namespace dualfed
