// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace dualfed {
namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(const Bytes& in) : in_(in) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  void finish() const {
    if (pos_ != in_.size()) throw IoError("payload: trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IoError("payload: truncated");
  }
  const Bytes& in_;
  std::size_t pos_ = 0;
};

std::uint32_t narrow(Eigen::Index v) {
  if (v < 0 || v > std::numeric_limits<std::uint32_t>::max()) throw IoError("payload: dimension too large");
  return static_cast<std::uint32_t>(v);
}

void write_matrix(Writer& w, const Matrix& m) {
  w.u32(narrow(m.rows()));
  w.u32(narrow(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
  }
}

Matrix read_matrix(Reader& r) {
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.f64();
  }
  return m;
}

}  // namespace

Bytes serialize_lora(const LoraDelta& delta) {
  Writer w;
  w.u32(kLoraMagic);
  w.u32(kLoraVersion);
  w.u32(static_cast<std::uint32_t>(2 * delta.size()));
  for (const Matrix* m : delta.matrices()) write_matrix(w, *m);
  return w.take();
}

LoraDelta deserialize_lora(const Bytes& bytes) {
  Reader r(bytes);
  if (r.u32() != kLoraMagic) throw IoError("LoRA payload: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kLoraVersion) throw IoError("LoRA payload: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  if (count % 2 != 0) throw IoError("LoRA payload: odd matrix count");
  std::vector<LoraDelta::Factors> factors;
  for (std::uint32_t i = 0; i < count / 2; ++i) {
    Matrix a = read_matrix(r);
    Matrix b = read_matrix(r);
    if (b.cols() != a.rows()) throw IoError("LoRA payload: factor ranks disagree");
    factors.push_back({std::move(a), std::move(b)});
  }
  r.finish();
  return LoraDelta(std::move(factors));
}

Bytes serialize_embeddings(const EmbeddingBatch& batch) {
  if (static_cast<Eigen::Index>(batch.labels.size()) != batch.embeddings.cols()) {
    throw ShapeError("serialize_embeddings: one label per embedding required");
  }
  Writer w;
  w.u32(narrow(batch.embeddings.cols()));
  w.u32(narrow(batch.embeddings.rows()));
  for (int label : batch.labels) {
    if (label < 0) throw ShapeError("serialize_embeddings: negative label");
    w.u32(static_cast<std::uint32_t>(label));
  }
  for (Eigen::Index j = 0; j < batch.embeddings.cols(); ++j) {
    for (Eigen::Index i = 0; i < batch.embeddings.rows(); ++i) w.f64(batch.embeddings(i, j));
  }
  return w.take();
}

EmbeddingBatch deserialize_embeddings(const Bytes& bytes) {
  Reader r(bytes);
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  EmbeddingBatch out;
  out.labels.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) out.labels.push_back(static_cast<int>(r.u32()));
  out.embeddings.resize(dim, count);
  for (std::uint32_t j = 0; j < count; ++j) {
    for (std::uint32_t i = 0; i < dim; ++i) out.embeddings(i, j) = r.f64();
  }
  r.finish();
  return out;
}

Bytes serialize_scalar(double value) {
  Writer w;
  w.f64(value);
  return w.take();
}

double deserialize_scalar(const Bytes& bytes) {
  Reader r(bytes);
  const double v = r.f64();
  r.finish();
  return v;
}

void write_file(const std::string& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace dualfed
