// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "dualfed/evaluation.hpp"
#include "dualfed/rng.hpp"
#include "oracles.hpp"

using namespace dualfed;

namespace {

// argmax over candidate columns by plain loops, lowest id on ties
int oracle_predict(const Matrix& text, const std::vector<int>& candidates, const Vector& z) {
  std::vector<int> sorted = candidates;
  std::sort(sorted.begin(), sorted.end());
  int best = sorted.front();
  double best_sim = -INFINITY;
  for (int c : sorted) {
    const double s = oracle::dot(oracle::to_std(text.col(c)), oracle::to_std(z));
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return best;
}

}  // namespace

TEST(Accuracy, TrueClassAlwaysFirstGivesOne) {
  const Matrix text = Matrix::Identity(4, 4);
  const Matrix img = text;
  EXPECT_EQ(accuracy(img, {0, 1, 2, 3}, text, {0, 1, 2, 3}, 0.05), 1.0);
}

TEST(Accuracy, SingleCandidateIsAlwaysRight) {
  Rng rng = make_rng({1});
  const Matrix text = normalize_columns(gaussian_matrix(rng, 5, 6, 1.0));
  const Matrix img = normalize_columns(gaussian_matrix(rng, 5, 9, 1.0));
  EXPECT_EQ(accuracy(img, std::vector<int>(9, 4), text, {4}, 0.05), 1.0);
}

TEST(Accuracy, HandBuiltTwoOfThree) {
  Matrix text(2, 3);
  text << 1, 0, -1, 0, 1, 0;
  Matrix img(2, 3);
  // nearest columns: 0, 1, 2
  img << 0.9, 0.1, -0.8, 0.1, 0.9, 0.2;
  EXPECT_NEAR(*accuracy(img, {0, 1, 0}, text, {0, 1, 2}, 0.05), 2.0 / 3.0, 1e-15);
}

TEST(Accuracy, EmptySampleSetIsAbsent) {
  const Matrix text = Matrix::Identity(2, 2);
  EXPECT_FALSE(accuracy(Matrix(2, 0), {}, text, {0, 1}, 0.05).has_value());
  EXPECT_THROW(accuracy(Matrix(2, 0), {}, text, {}, 0.05), std::invalid_argument);
  EXPECT_THROW(accuracy(Matrix(2, 1), {}, text, {0}, 0.05), ShapeError);
}

TEST(Accuracy, TiesGoToLowestClassId) {
  Matrix text(2, 3);
  text << 0, 1, 1, 1, 0, 0;  // classes 1 and 2 identical
  Matrix img(2, 1);
  img << 1, 0;
  EXPECT_EQ(accuracy(img, {1}, text, {2, 1, 0}, 0.05), 1.0);
  EXPECT_EQ(accuracy(img, {2}, text, {2, 1, 0}, 0.05), 0.0);
}

TEST(Accuracy, MatchesLoopOracleAndIgnoresTemperature) {
  Rng rng = make_rng({2});
  std::uniform_real_distribution<double> log_tau(std::log(0.01), std::log(10.0));
  for (int trial = 0; trial < 40; ++trial) {
    const Matrix text = normalize_columns(gaussian_matrix(rng, 6, 10, 1.0));
    const Matrix img = normalize_columns(gaussian_matrix(rng, 6, 30, 1.0));
    const std::vector<int> candidates = {7, 1, 3, 8, 4};
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) labels.push_back(candidates[static_cast<std::size_t>(i % 5)]);
    int hits = 0;
    for (int i = 0; i < 30; ++i) hits += oracle_predict(text, candidates, img.col(i)) == labels[static_cast<std::size_t>(i)];
    const double expected = hits / 30.0;
    EXPECT_NEAR(*accuracy(img, labels, text, candidates, 0.05), expected, 1e-15);
    EXPECT_NEAR(*accuracy(img, labels, text, candidates, std::exp(log_tau(rng))), expected, 1e-15);
  }
}

TEST(HarmonicMean, Examples) {
  EXPECT_DOUBLE_EQ(harmonic_mean(0.37, 0.37), 0.37);
  EXPECT_EQ(harmonic_mean(1.0, 0.0), 0.0);
  EXPECT_EQ(harmonic_mean(0.0, 0.0), 0.0);
  EXPECT_NEAR(harmonic_mean(0.9, 0.6), 0.72, 1e-15);
  EXPECT_THROW(harmonic_mean(-0.1, 0.5), std::invalid_argument);
}

TEST(HarmonicMean, BoundedByTheTwoInputs) {
  for (double b = 0.0; b <= 1.0; b += 0.05) {
    for (double n = 0.0; n <= 1.0; n += 0.05) {
      const double h = harmonic_mean(b, n);
      EXPECT_LE(h, std::max(b, n) + 1e-15);
      EXPECT_GE(h, std::min(b, n) - 1e-15);
    }
  }
}

namespace {

struct Fixture {
  Dataset test;
  Matrix text;
  EncoderStack image = testutil::identity_stack(4, 1, 1);
  EvaluationContext ctx;
};

// Four classes on the axes; class 0,1 base, 2,3 novel. Sample i sits near axis
// `pred[i]` but carries label `label[i]`.
Fixture axis_fixture(const std::vector<int>& labels, const std::vector<int>& pred) {
  Fixture f;
  f.text = Matrix::Identity(4, 4);
  f.test.features = Matrix::Zero(4, static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    f.test.features(pred[i], static_cast<Eigen::Index>(i)) = 1.0;
    f.test.features(3 - pred[i], static_cast<Eigen::Index>(i)) = 0.2;
    f.test.labels.push_back(labels[i]);
    f.test.domains.push_back(0);
  }
  f.ctx.test = &f.test;
  f.ctx.base_classes = {0, 1};
  f.ctx.novel_classes = {2, 3};
  return f;
}

}  // namespace

TEST(EvaluateGlobal, NovelCandidatesAreNovelOnly) {
  // base classes never compete for novel samples
  Fixture f = axis_fixture({0, 1, 2, 3}, {0, 1, 0, 3});
  f.ctx.test = &f.test;
  const RoundMetrics m = evaluate_global(f.image, f.text, 0.05, f.ctx);
  EXPECT_EQ(m.base_accuracy, 1.0);
  // sample 2: among {2,3} the 0.2 on axis 3 wins, so it is wrong
  EXPECT_EQ(m.novel_accuracy, 0.5);
  EXPECT_NEAR(*m.hm, harmonic_mean(1.0, 0.5), 0.0);
}

TEST(EvaluateGlobal, LocalAccuracyAveragesClientsUniformly) {
  Fixture f = axis_fixture({0, 0, 0, 1, 2, 3}, {0, 0, 1, 1, 2, 3});
  f.ctx.test = &f.test;
  f.ctx.client_classes = {{0}, {0, 1}};
  f.ctx.client_domains = {{0}, {0}};
  const RoundMetrics m = evaluate_global(f.image, f.text, 0.05, f.ctx);
  // client 0: single candidate -> 1; client 1: 3 of 4 right
  EXPECT_NEAR(*m.local_accuracy, 0.5 * (1.0 + 0.75), 1e-15);
  EXPECT_TRUE(m.domain_accuracy.empty());
}

TEST(EvaluateGlobal, NoNovelClassesLeavesNovelAndHmAbsent) {
  Fixture f = axis_fixture({0, 1}, {0, 1});
  f.ctx.test = &f.test;
  f.ctx.novel_classes.clear();
  const RoundMetrics m = evaluate_global(f.image, f.text, 0.05, f.ctx);
  EXPECT_FALSE(m.novel_accuracy.has_value());
  EXPECT_FALSE(m.hm.has_value());
  EXPECT_FALSE(m.local_accuracy.has_value());
}

TEST(EvaluateGlobal, PerDomainBaseAccuracy) {
  Fixture f = axis_fixture({0, 1, 0, 1}, {0, 1, 1, 1});
  f.test.domains = {0, 0, 1, 1};
  f.ctx.test = &f.test;
  f.ctx.num_domains = 2;
  const RoundMetrics m = evaluate_global(f.image, f.text, 0.05, f.ctx);
  ASSERT_EQ(m.domain_accuracy.size(), 2u);
  EXPECT_EQ(m.domain_accuracy[0], 1.0);
  EXPECT_EQ(m.domain_accuracy[1], 0.5);
}

TEST(MetricsCsv, HeaderAndRow) {
  std::ostringstream out;
  write_metrics_header(out, 1);
  RoundMetrics m;
  m.round = 3;
  m.stage = "rl";
  m.train_accuracy_mean = 0.5;
  m.local_accuracy = 0.25;
  m.base_accuracy = 0.9;
  m.novel_accuracy = 0.6;
  m.hm = harmonic_mean(0.9, 0.6);
  write_metrics_row(out, m, 1);
  m.novel_accuracy.reset();
  m.hm.reset();
  write_metrics_row(out, m, 1);
  EXPECT_EQ(out.str(),
            "round,stage,train_acc_mean,local_acc,base_acc,novel_acc,hm\n"
            "3,rl,0.5,0.25,0.9,0.6,0.72\n"
            "3,rl,0.5,0.25,0.9,,\n");
}

TEST(MetricsCsv, DomainColumns) {
  std::ostringstream out;
  write_metrics_header(out, 2);
  RoundMetrics m;
  m.stage = "sft";
  m.domain_accuracy = {0.5, std::nullopt};
  write_metrics_row(out, m, 2);
  EXPECT_EQ(out.str(),
            "round,stage,train_acc_mean,local_acc,base_acc,novel_acc,hm,domain_0_acc,domain_1_acc\n"
            "0,sft,0,,,,,0.5,\n");
}
