// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dualfed/data.hpp"
#include "dualfed/encoders.hpp"

namespace dualfed {

// Fraction of samples whose most probable candidate class is their label.
// Candidates are class ids (columns of `text_embeddings`); ties go to the
// lowest class id. Empty sample set -> nullopt.
std::optional<double> accuracy(const Matrix& image_embeddings, const std::vector<int>& labels,
                               const Matrix& text_embeddings, const std::vector<int>& candidates,
                               double tau);

// 2bn / (b + n), 0 when both are 0.
double harmonic_mean(double base, double novel);

struct RoundMetrics {
  int round = 0;
  std::string stage;  // "zero_shot", "sft" or "rl"
  std::vector<double> client_train_accuracy;
  double train_accuracy_mean = 0.0;
  std::optional<double> local_accuracy;
  std::optional<double> base_accuracy;
  std::optional<double> novel_accuracy;
  std::optional<double> hm;
  std::vector<std::optional<double>> domain_accuracy;
  double mean_train_loss = 0.0;
  int skipped_steps = 0;
};

struct EvaluationContext {
  const Dataset* test = nullptr;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  // per client: classes and domains it trains on
  std::vector<std::vector<int>> client_classes;
  std::vector<std::vector<int>> client_domains;
  int num_domains = 1;
};

// Global-model metrics: local (uniform mean over clients), base, novel, HM and
// per-domain base accuracy when there is more than one domain.
RoundMetrics evaluate_global(const EncoderStack& image, const Matrix& text_embeddings, double tau,
                             const EvaluationContext& ctx);

void write_metrics_header(std::ostream& out, int num_domains);
void write_metrics_row(std::ostream& out, const RoundMetrics& m, int num_domains);

}  // namespace dualfed
