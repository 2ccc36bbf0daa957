// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

namespace dualfed {

std::optional<double> accuracy(const Matrix& image_embeddings, const std::vector<int>& labels,
                               const Matrix& text_embeddings, const std::vector<int>& candidates,
                               double tau) {
  if (candidates.empty()) throw std::invalid_argument("accuracy: empty candidate set");
  if (static_cast<Eigen::Index>(labels.size()) != image_embeddings.cols()) {
    throw ShapeError("accuracy: one label per embedding required");
  }
  if (labels.empty()) return std::nullopt;
  std::vector<int> sorted = candidates;
  std::sort(sorted.begin(), sorted.end());
  const Matrix cand = [&] {
    Matrix m(text_embeddings.rows(), static_cast<Eigen::Index>(sorted.size()));
    for (std::size_t k = 0; k < sorted.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = text_embeddings.col(sorted[k]);
    return m;
  }();
  const Matrix probs = softmax_columns(cand.transpose() * image_embeddings, tau);
  int hits = 0;
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.rows(); ++k) {
      if (probs(k, i) > probs(best, i)) best = k;
    }
    hits += sorted[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double harmonic_mean(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw std::invalid_argument("harmonic_mean: negative accuracy");
  if (base + novel == 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

namespace {

std::optional<double> accuracy_on(const Matrix& embeddings, const Dataset& test,
                                  const std::function<bool(std::size_t)>& keep,
                                  const Matrix& text_embeddings, const std::vector<int>& candidates,
                                  double tau) {
  std::vector<Eigen::Index> cols;
  std::vector<int> labels;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (keep(i)) {
      cols.push_back(static_cast<Eigen::Index>(i));
      labels.push_back(test.labels[i]);
    }
  }
  if (candidates.empty()) return std::nullopt;
  return accuracy(embeddings(Eigen::all, cols), labels, text_embeddings, candidates, tau);
}

}  // namespace

RoundMetrics evaluate_global(const EncoderStack& image, const Matrix& text_embeddings, double tau,
                             const EvaluationContext& ctx) {
  const Dataset& test = *ctx.test;
  const Matrix emb = encode_images(image, test.features);
  const std::set<int> base(ctx.base_classes.begin(), ctx.base_classes.end());
  const std::set<int> novel(ctx.novel_classes.begin(), ctx.novel_classes.end());

  RoundMetrics m;
  m.base_accuracy = accuracy_on(
      emb, test, [&](std::size_t i) { return base.count(test.labels[i]) > 0; }, text_embeddings,
      ctx.base_classes, tau);
  m.novel_accuracy = accuracy_on(
      emb, test, [&](std::size_t i) { return novel.count(test.labels[i]) > 0; }, text_embeddings,
      ctx.novel_classes, tau);
  if (m.base_accuracy && m.novel_accuracy) m.hm = harmonic_mean(*m.base_accuracy, *m.novel_accuracy);

  double local_sum = 0.0;
  int local_n = 0;
  for (std::size_t k = 0; k < ctx.client_classes.size(); ++k) {
    const std::set<int> cls(ctx.client_classes[k].begin(), ctx.client_classes[k].end());
    const std::set<int> dom(ctx.client_domains[k].begin(), ctx.client_domains[k].end());
    const auto acc = accuracy_on(
        emb, test,
        [&](std::size_t i) { return cls.count(test.labels[i]) > 0 && dom.count(test.domains[i]) > 0; },
        text_embeddings, ctx.client_classes[k], tau);
    if (acc) {
      local_sum += *acc;
      ++local_n;
    }
  }
  if (local_n > 0) m.local_accuracy = local_sum / local_n;

  if (ctx.num_domains > 1) {
    for (int d = 0; d < ctx.num_domains; ++d) {
      m.domain_accuracy.push_back(accuracy_on(
          emb, test, [&](std::size_t i) { return test.domains[i] == d && base.count(test.labels[i]) > 0; },
          text_embeddings, ctx.base_classes, tau));
    }
  }
  return m;
}

namespace {

void put(std::ostream& out, const std::optional<double>& v) {
  out << ',';
  if (!v) return;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  out << buf;
}

}  // namespace

void write_metrics_header(std::ostream& out, int num_domains) {
  out << "round,stage,train_acc_mean,local_acc,base_acc,novel_acc,hm";
  if (num_domains > 1) {
    for (int d = 0; d < num_domains; ++d) out << ",domain_" << d << "_acc";
  }
  out << '\n';
}

void write_metrics_row(std::ostream& out, const RoundMetrics& m, int num_domains) {
  out << m.round << ',' << m.stage;
  put(out, m.train_accuracy_mean);
  put(out, m.local_accuracy);
  put(out, m.base_accuracy);
  put(out, m.novel_accuracy);
  put(out, m.hm);
  if (num_domains > 1) {
    for (int d = 0; d < num_domains; ++d) {
      put(out, d < static_cast<int>(m.domain_accuracy.size()) ? m.domain_accuracy[d] : std::nullopt);
    }
  }
  out << '\n';
}

}  // namespace dualfed
