// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

#include "dualfed/errors.hpp"
#include "dualfed/numerics.hpp"

namespace dualfed {

/// Linear map W = W0 + B*A with W0 frozen. A rank-0 layer (empty A/B) is a
/// plain frozen linear layer.
struct LoraLinear {
  Matrix w0;  // d1 x d2, never mutated after construction
  Matrix a;   // r x d2
  Matrix b;   // d1 x r

  LoraLinear() = default;
  LoraLinear(Matrix base, Eigen::Index rank);

  Eigen::Index rank() const { return a.rows(); }
  Eigen::Index out_dim() const { return w0.rows(); }
  Eigen::Index in_dim() const { return w0.cols(); }
  bool trainable() const { return rank() > 0; }

  // W0 + B*A materialized.
  Matrix dense() const { return w0 + b * a; }
};

template <typename Derived>
Matrix lora_forward(const LoraLinear& layer, const Eigen::MatrixBase<Derived>& x) {
  if (x.rows() != layer.in_dim()) {
    throw ShapeError("lora_forward: input has " + std::to_string(x.rows()) +
                     " rows, layer expects " + std::to_string(layer.in_dim()) + " (W0 is " +
                     shape_string(layer.w0.rows(), layer.w0.cols()) + ")");
  }
  Matrix out = layer.w0 * x;
  if (layer.trainable()) out.noalias() += layer.b * (layer.a * x);
  return out;
}

/// The trainable part of an encoder: the (A, B) factors of every LoRA layer,
/// in layer order. This is the unit that clients and the server exchange.
class LoraDelta {
 public:
  struct Factors {
    Matrix a;
    Matrix b;
  };

  LoraDelta() = default;
  explicit LoraDelta(std::vector<Factors> factors) : factors_(std::move(factors)) {}

  std::size_t size() const { return factors_.size(); }
  bool empty() const { return factors_.empty(); }
  const Factors& operator[](std::size_t i) const { return factors_[i]; }
  Factors& operator[](std::size_t i) { return factors_[i]; }
  const std::vector<Factors>& factors() const { return factors_; }

  // Flat matrix view, ordered A0, B0, A1, B1, ...
  std::vector<const Matrix*> matrices() const;
  std::vector<Matrix*> matrices();

  bool same_shape(const LoraDelta& other) const;
  void require_same_shape(const LoraDelta& other, const char* context) const;

  LoraDelta zeros_like() const;
  // this += weight * other
  void add_scaled(const LoraDelta& other, double weight);
  LoraDelta scaled(double weight) const;

  double squared_norm() const;
  Eigen::Index parameter_count() const;

  Vector flatten() const;
  void assign_flat(const Vector& flat);

  bool operator==(const LoraDelta& other) const;

 private:
  std::vector<Factors> factors_;
};

}  // namespace dualfed
