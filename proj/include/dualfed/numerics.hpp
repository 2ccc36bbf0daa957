// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

#include "dualfed/errors.hpp"

namespace dualfed {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

// Temperature-scaled softmax of a similarity vector. Max-subtracted, so it is
// invariant to adding a constant to every entry.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax_with_temperature(
    const Eigen::MatrixBase<Derived>& sims, typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > Scalar(0))) throw std::invalid_argument("softmax: temperature must be positive");
  if (sims.size() == 0) throw ShapeError("softmax: empty similarity vector");
  if (!sims.allFinite()) throw NumericError("softmax: non-finite similarity");
  const Scalar peak = sims.maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> p = ((sims.derived().reshaped().array() - peak) / tau).exp();
  p /= p.sum();
  return p;
}

// Column-wise variant: each column of `sims` is one sample's similarity vector.
Matrix softmax_columns(const Matrix& sims, double tau);
Matrix log_softmax_columns(const Matrix& sims, double tau);

// Scales every column to unit L2 norm. Columns with norm below `min_norm`
// raise NumericError.
Matrix normalize_columns(const Matrix& m, double min_norm = 1e-12);

// Central-difference gradient of a scalar function of a flat parameter vector.
// Verification oracle for the tape.
Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& params,
                            double h);

// Relative error used by every gradient check: |a - n| / max(|a|, |n|), entries
// where both magnitudes are below `floor` are skipped.
double max_relative_error(const Vector& analytic, const Vector& numeric, double floor = 1e-8);

}  // namespace dualfed
