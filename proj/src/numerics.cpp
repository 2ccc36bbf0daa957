// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/numerics.hpp"

#include <algorithm>
#include <string>

namespace dualfed {

std::string shape_string(long rows, long cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

Matrix log_softmax_columns(const Matrix& sims, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  if (!sims.allFinite()) throw NumericError("softmax: non-finite similarity");
  Matrix out(sims.rows(), sims.cols());
  for (Eigen::Index j = 0; j < sims.cols(); ++j) {
    const auto scaled = (sims.col(j).array() - sims.col(j).maxCoeff()) / tau;
    const double lse = std::log(scaled.exp().sum());
    out.col(j) = scaled - lse;
  }
  return out;
}

Matrix softmax_columns(const Matrix& sims, double tau) {
  return log_softmax_columns(sims, tau).array().exp().matrix();
}

Matrix normalize_columns(const Matrix& m, double min_norm) {
  Matrix out = m;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (!(n >= min_norm)) {
      throw NumericError("normalize: column " + std::to_string(j) + " has degenerate norm");
    }
    out.col(j) /= n;
  }
  return out;
}

Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& params,
                            double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient: step must be positive");
  Vector grad(params.size());
  Vector probe = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    probe(i) = params(i) + h;
    const double up = f(probe);
    probe(i) = params(i) - h;
    const double down = f(probe);
    probe(i) = params(i);
    grad(i) = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(const Vector& analytic, const Vector& numeric, double floor) {
  if (analytic.size() != numeric.size()) {
    throw ShapeError("max_relative_error: length mismatch");
  }
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max(std::abs(analytic(i)), std::abs(numeric(i)));
    if (scale < floor) continue;
    worst = std::max(worst, std::abs(analytic(i) - numeric(i)) / scale);
  }
  return worst;
}

}  // namespace dualfed
