// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/lora.hpp"

#include <algorithm>
#include <string>

namespace dualfed {

namespace {

Eigen::Index checked_rank(const Matrix& w0, Eigen::Index rank) {
  if (rank < 0) throw ShapeError("LoraLinear: negative rank");
  if (2 * rank > std::min(w0.rows(), w0.cols())) {
    throw ShapeError("LoraLinear: rank " + std::to_string(rank) + " exceeds half of min(" +
                     shape_string(w0.rows(), w0.cols()) + ")");
  }
  return rank;
}

}  // namespace

LoraLinear::LoraLinear(Matrix base, Eigen::Index rank)
    : w0(std::move(base)),
      a(Matrix::Zero(checked_rank(w0, rank), w0.cols())),
      b(Matrix::Zero(w0.rows(), rank)) {}

std::vector<const Matrix*> LoraDelta::matrices() const {
  std::vector<const Matrix*> out;
  out.reserve(2 * factors_.size());
  for (const auto& f : factors_) {
    out.push_back(&f.a);
    out.push_back(&f.b);
  }
  return out;
}

std::vector<Matrix*> LoraDelta::matrices() {
  std::vector<Matrix*> out;
  out.reserve(2 * factors_.size());
  for (auto& f : factors_) {
    out.push_back(&f.a);
    out.push_back(&f.b);
  }
  return out;
}

bool LoraDelta::same_shape(const LoraDelta& other) const {
  if (factors_.size() != other.factors_.size()) return false;
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    const auto& x = factors_[i];
    const auto& y = other.factors_[i];
    if (x.a.rows() != y.a.rows() || x.a.cols() != y.a.cols() || x.b.rows() != y.b.rows() ||
        x.b.cols() != y.b.cols()) {
      return false;
    }
  }
  return true;
}

void LoraDelta::require_same_shape(const LoraDelta& other, const char* context) const {
  if (!same_shape(other)) {
    throw ShapeError(std::string(context) + ": LoRA delta shapes differ");
  }
}

LoraDelta LoraDelta::zeros_like() const {
  std::vector<Factors> out;
  out.reserve(factors_.size());
  for (const auto& f : factors_) {
    out.push_back({Matrix::Zero(f.a.rows(), f.a.cols()), Matrix::Zero(f.b.rows(), f.b.cols())});
  }
  return LoraDelta(std::move(out));
}

void LoraDelta::add_scaled(const LoraDelta& other, double weight) {
  require_same_shape(other, "LoraDelta::add_scaled");
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    factors_[i].a += weight * other.factors_[i].a;
    factors_[i].b += weight * other.factors_[i].b;
  }
}

LoraDelta LoraDelta::scaled(double weight) const {
  LoraDelta out = *this;
  for (auto& f : out.factors_) {
    f.a *= weight;
    f.b *= weight;
  }
  return out;
}

double LoraDelta::squared_norm() const {
  double s = 0.0;
  for (const auto& f : factors_) s += f.a.squaredNorm() + f.b.squaredNorm();
  return s;
}

Eigen::Index LoraDelta::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& f : factors_) n += f.a.size() + f.b.size();
  return n;
}

Vector LoraDelta::flatten() const {
  Vector flat(parameter_count());
  Eigen::Index offset = 0;
  for (const Matrix* m : matrices()) {
    flat.segment(offset, m->size()) = m->reshaped();
    offset += m->size();
  }
  return flat;
}

void LoraDelta::assign_flat(const Vector& flat) {
  if (flat.size() != parameter_count()) throw ShapeError("LoraDelta::assign_flat: length mismatch");
  Eigen::Index offset = 0;
  for (Matrix* m : matrices()) {
    m->reshaped() = flat.segment(offset, m->size());
    offset += m->size();
  }
}

bool LoraDelta::operator==(const LoraDelta& other) const {
  if (!same_shape(other)) return false;
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    if (factors_[i].a != other.factors_[i].a || factors_[i].b != other.factors_[i].b) return false;
  }
  return true;
}

}  // namespace dualfed
