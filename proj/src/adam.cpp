// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/adam.hpp"

#include <cmath>

namespace dualfed {

AdamState::AdamState(const std::vector<const Matrix*>& params, AdamConfig config)
    : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Matrix* p : params) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

bool adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               AdamState& state, double learning_rate) {
  if (params.size() != grads.size() || params.size() != state.m_.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols() ||
        state.m_[i].rows() != grads[i].rows() || state.m_[i].cols() != grads[i].cols()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
    if (!grads[i].allFinite()) return false;
  }

  const AdamConfig& c = state.config_;
  ++state.step_;
  const double t = static_cast<double>(state.step_);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.m_[i];
    Matrix& v = state.v_[i];
    m = c.beta1 * m + (1.0 - c.beta1) * grads[i];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[i].cwiseAbs2();
    const auto m_hat = m.array() / correction1;
    const auto v_hat = v.array() / correction2;
    params[i]->array() -= learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
  }
  return true;
}

}  // namespace dualfed
