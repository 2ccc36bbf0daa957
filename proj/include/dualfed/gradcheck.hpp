// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dualfed {

enum class GradLoss { kCe, kGrpo, kDrGrpo, kGmpo, kDapo, kLitePpo, kText };

std::string to_string(GradLoss l);
GradLoss parse_grad_loss(const std::string& s);
const std::vector<GradLoss>& all_grad_losses();

// Max elementwise relative error between tape gradients and central finite
// differences (h = 1e-5) on one random small instance. Entries where both
// magnitudes are below 1e-8 are ignored.
double gradcheck_instance(GradLoss loss, std::uint64_t seed, int instance);

struct GradcheckReport {
  GradLoss loss;
  int instances = 0;
  double max_relative_error = 0.0;
  bool passed(double tolerance = 1e-4) const { return max_relative_error < tolerance; }
};

GradcheckReport gradcheck(GradLoss loss, std::uint64_t seed, int instances = 50);

}  // namespace dualfed
