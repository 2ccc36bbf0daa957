// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dualfed/numerics.hpp"

namespace dualfed {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment buffers shaped like the parameters they track.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<const Matrix*>& params, AdamConfig config = {});

  const AdamConfig& config() const { return config_; }
  long step() const { return step_; }
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }

 private:
  friend bool adam_step(const std::vector<Matrix*>&, const std::vector<Matrix>&, AdamState&,
                        double);
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_ = 0;
};

// Bias-corrected Adam update in place. Returns false and leaves parameters and
// state untouched when any gradient entry is non-finite.
bool adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               AdamState& state, double learning_rate);

}  // namespace dualfed
