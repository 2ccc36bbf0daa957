// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dualfed/lora.hpp"
#include "dualfed/numerics.hpp"
#include "dualfed/tape.hpp"

namespace dualfed {

/// MLP of (possibly LoRA-augmented) linear layers with tanh between layers
/// and no activation after the last one. Its output is the pre-normalization
/// latent; callers normalize.
class EncoderStack {
 public:
  EncoderStack() = default;
  explicit EncoderStack(std::vector<LoraLinear> layers);

  Eigen::Index input_dim() const { return layers_.front().in_dim(); }
  Eigen::Index output_dim() const { return layers_.back().out_dim(); }
  bool trainable() const;
  const std::vector<LoraLinear>& layers() const { return layers_; }

  // One column per sample.
  Matrix forward(const Matrix& x) const;

  // Adds one parameter leaf per LoRA matrix, ordered like LoraDelta::matrices().
  std::vector<Tape::Var> register_lora(Tape& tape) const;
  Tape::Var forward(Tape& tape, Tape::Var x, const std::vector<Tape::Var>& lora_leaves) const;

  LoraDelta lora() const;
  void set_lora(const LoraDelta& delta);
  std::vector<Matrix*> lora_parameters();

 private:
  std::vector<LoraLinear> layers_;
};

/// Fixed per-class description vectors standing in for tokenized class names.
/// Vector c depends only on (seed, c).
class ClassTextBank {
 public:
  ClassTextBank() = default;
  ClassTextBank(std::uint64_t seed, int num_classes, Eigen::Index dim);

  int num_classes() const { return static_cast<int>(vectors_.cols()); }
  Eigen::Index dim() const { return vectors_.rows(); }
  Vector raw(int class_id) const;
  // dim x num_classes, unit columns
  const Matrix& matrix() const { return vectors_; }
  Matrix columns(const std::vector<int>& class_ids) const;

 private:
  Matrix vectors_;
};

struct DualEncoder {
  EncoderStack image;
  EncoderStack text;
  double tau = 0.05;
};

struct ModelDims {
  Eigen::Index input_dim = 16;
  Eigen::Index text_dim = 16;
  Eigen::Index embed_dim = 16;
  int layers = 2;
  int lora_rank = 4;
  // layers with index >= lora_start carry LoRA factors
  int lora_start = 1;
};

// Normalized image embedding; `noise` is added to the latent before
// normalization. Throws NumericError on a zero-norm latent.
Vector encode_image(const EncoderStack& enc, const Vector& x,
                    const std::optional<Vector>& noise = std::nullopt);
// Batch form: one column per sample; `noise` (if non-empty) matches the latent shape.
Matrix encode_images(const EncoderStack& enc, const Matrix& x, const Matrix& noise = Matrix());

Vector encode_text(const EncoderStack& enc, const ClassTextBank& bank, int class_id);
// embed_dim x num_classes
Matrix encode_all_text(const EncoderStack& enc, const ClassTextBank& bank);

// Eq. 1 probabilities: softmax over cosine similarities / tau. Inputs are unit
// vectors, so cosine similarity is the dot product.
Vector class_probabilities(const Vector& image_embedding, const Matrix& text_embeddings, double tau);

// Near-identity frozen layers (I + N(0, perturbation^2)) with zero-initialized
// LoRA deltas, so unseen classes are aligned before any training.
DualEncoder init_pretrained_like(std::uint64_t seed, const ModelDims& dims, double tau,
                                 double perturbation = 0.02);

}  // namespace dualfed
