// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dualfed/data.hpp"
#include "dualfed/encoders.hpp"
#include "dualfed/evaluation.hpp"
#include "dualfed/rng.hpp"
#include "oracles.hpp"

using namespace dualfed;

namespace {

double max_abs_diff(const Vector& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a(i) - b[static_cast<std::size_t>(i)]));
  return worst;
}

Matrix random_rotation(Rng& rng, Eigen::Index d) {
  Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(rng, d, d, 1.0));
  return qr.householderQ();
}

}  // namespace

TEST(LoraLinear, BStartsAtZeroSoTheDeltaVanishes) {
  Rng rng = make_rng({1});
  const Matrix w0 = gaussian_matrix(rng, 8, 6, 1.0);
  const LoraLinear layer(w0, 3);
  EXPECT_EQ(layer.b, Matrix::Zero(8, 3));
  EXPECT_EQ(layer.a.rows(), 3);
  EXPECT_EQ(layer.dense(), w0);
}

TEST(LoraLinear, RankBoundedByHalfTheSmallerDimension) {
  EXPECT_NO_THROW(LoraLinear(Matrix::Identity(8, 6), 3));
  EXPECT_THROW(LoraLinear(Matrix::Identity(8, 6), 4), ShapeError);
  EXPECT_THROW(LoraLinear(Matrix::Identity(4, 4), -1), ShapeError);
}

TEST(LoraLinear, ForwardMatchesDenseAndLoopOracle) {
  Rng rng = make_rng({2});
  LoraLinear layer(gaussian_matrix(rng, 5, 6, 1.0), 2);
  layer.a = gaussian_matrix(rng, 2, 6, 1.0);
  layer.b = gaussian_matrix(rng, 5, 2, 1.0);
  const Matrix x = gaussian_matrix(rng, 6, 4, 1.0);
  const Matrix got = lora_forward(layer, x);
  EXPECT_LT((got - oracle::matmul(layer.dense(), x)).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_THROW(lora_forward(layer, Matrix::Ones(5, 1)), ShapeError);
}

TEST(EncoderStack, RejectsUnchainedLayers) {
  std::vector<LoraLinear> layers;
  layers.emplace_back(Matrix::Identity(4, 4), 0);
  layers.emplace_back(Matrix::Identity(5, 5), 0);
  EXPECT_THROW(EncoderStack(std::move(layers)), ShapeError);
  EXPECT_THROW(EncoderStack(std::vector<LoraLinear>{}), ShapeError);
}

TEST(EncoderStack, TapeForwardEqualsPlainForward) {
  Rng rng = make_rng({3});
  const EncoderStack s = testutil::random_stack(rng, 6, 2, 3);
  const Matrix x = gaussian_matrix(rng, 6, 5, 1.0);
  Tape tape;
  const auto leaves = s.register_lora(tape);
  EXPECT_EQ(tape.value(s.forward(tape, tape.constant(x), leaves)), s.forward(x));
}

TEST(EncoderStack, LoraRoundTripAndShapeCheck) {
  Rng rng = make_rng({4});
  EncoderStack s = testutil::random_stack(rng, 6, 2);
  LoraDelta d = s.lora();
  EXPECT_EQ(d.size(), 2u);
  for (Matrix* m : d.matrices()) m->setConstant(0.25);
  s.set_lora(d);
  EXPECT_TRUE(s.lora() == d);
  LoraDelta wrong({{Matrix::Zero(1, 6), Matrix::Zero(6, 1)}});
  EXPECT_THROW(s.set_lora(wrong), ShapeError);
}

TEST(EncodeImage, ZeroNoiseEqualsNoNoise) {
  Rng rng = make_rng({5});
  const EncoderStack s = testutil::random_stack(rng, 6, 2);
  const Vector x = gaussian_matrix(rng, 6, 1, 1.0);
  EXPECT_EQ(encode_image(s, x, Vector::Zero(6)), encode_image(s, x));
}

TEST(EncodeImage, IdentityStackReturnsUnitInput) {
  Rng rng = make_rng({6});
  const Vector x = normalize_columns(gaussian_matrix(rng, 7, 1, 1.0));
  const Vector z = encode_image(testutil::identity_stack(7), x);
  EXPECT_LT((z - x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EncodeImage, MatchesStraightLineOracle) {
  Rng rng = make_rng({7});
  for (int trial = 0; trial < 50; ++trial) {
    const EncoderStack s = testutil::random_stack(rng, 6, 3);
    const Vector x = gaussian_matrix(rng, 6, 1, 1.0);
    const Vector noise = gaussian_matrix(rng, 6, 1, 0.1);
    std::vector<double> z = oracle::forward(s, oracle::to_std(x));
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += noise(static_cast<Eigen::Index>(i));
    EXPECT_LT(max_abs_diff(encode_image(s, x, noise), oracle::normalize(z)), 1e-12);
  }
}

TEST(EncodeImage, BatchFormMatchesSingleForm) {
  Rng rng = make_rng({8});
  const EncoderStack s = testutil::random_stack(rng, 6, 2);
  const Matrix x = gaussian_matrix(rng, 6, 4, 1.0);
  const Matrix noise = gaussian_matrix(rng, 6, 4, 0.1);
  const Matrix z = encode_images(s, x, noise);
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_LT((z.col(i) - encode_image(s, x.col(i), Vector(noise.col(i)))).cwiseAbs().maxCoeff(), 1e-15);
  }
  EXPECT_THROW(encode_images(s, x, Matrix::Zero(6, 3)), ShapeError);
}

TEST(EncodeImage, DegenerateLatentAndBadShapesRejected) {
  const EncoderStack s = testutil::identity_stack(3);
  EXPECT_THROW(encode_image(s, Vector::Zero(3)), NumericError);
  Vector x = Vector::Ones(3);
  EXPECT_THROW(encode_image(s, x, Vector(-x)), NumericError);
  EXPECT_THROW(encode_image(s, Vector::Ones(4)), ShapeError);
  EXPECT_THROW(encode_image(s, x, Vector::Zero(2)), ShapeError);
}

TEST(ClassTextBank, UnitVectorsAndBitIdenticalRegeneration) {
  const ClassTextBank a(42, 12, 16);
  const ClassTextBank b(42, 12, 16);
  const ClassTextBank c(43, 12, 16);
  EXPECT_EQ(a.matrix(), b.matrix());
  EXPECT_NE(a.matrix(), c.matrix());
  for (int k = 0; k < 12; ++k) EXPECT_NEAR(a.raw(k).norm(), 1.0, 1e-15);
  // class c depends only on (seed, c)
  const ClassTextBank small(42, 5, 16);
  EXPECT_EQ(small.matrix(), a.matrix().leftCols(5));
}

TEST(EncodeText, IdentityStackReturnsPrototype) {
  const ClassTextBank bank(9, 4, 8);
  for (int c = 0; c < 4; ++c) {
    EXPECT_LT((encode_text(testutil::identity_stack(8), bank, c) - bank.raw(c)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(EncodeText, DeterministicAndMatchesOracle) {
  Rng rng = make_rng({10});
  const EncoderStack s = testutil::random_stack(rng, 8, 2);
  const ClassTextBank bank(9, 4, 8);
  for (int c = 0; c < 4; ++c) {
    const Vector z = encode_text(s, bank, c);
    EXPECT_EQ(z, encode_text(s, bank, c));
    EXPECT_LT(max_abs_diff(z, oracle::normalize(oracle::forward(s, oracle::to_std(bank.raw(c))))), 1e-12);
    EXPECT_LT((encode_all_text(s, bank).col(c) - z).cwiseAbs().maxCoeff(), 1e-15);
  }
  EXPECT_THROW(encode_text(s, bank, 4), std::out_of_range);
  EXPECT_THROW(encode_text(s, bank, -1), std::out_of_range);
}

TEST(ClassProbabilities, MatchingOrthogonalClassDominates) {
  const Matrix text = Matrix::Identity(5, 5);
  for (double tau : {0.1, 0.05, 0.01}) {
    const Vector p = class_probabilities(Vector(text.col(2)), text, tau);
    EXPECT_GE(p(2), 0.99) << tau;
  }
}

TEST(ClassProbabilities, IdenticalClassesGiveUniform) {
  Rng rng = make_rng({11});
  const Vector t = normalize_columns(gaussian_matrix(rng, 6, 1, 1.0));
  const Matrix text = t.replicate(1, 4);
  const Vector z = normalize_columns(gaussian_matrix(rng, 6, 1, 1.0));
  const Vector p = class_probabilities(z, text, 0.05);
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(p(c), 0.25, 1e-15);
}

TEST(ClassProbabilities, TwoClassHandValue) {
  // sims (0.8, 0.2) from unit vectors in the plane
  Matrix text(2, 2);
  text << 0.8, 0.2, 0.6, std::sqrt(1.0 - 0.04);
  const Vector z = Vector::Unit(2, 0);
  const Vector p = class_probabilities(z, text, 0.05);
  EXPECT_NEAR(p(0), 1.0 / (1.0 + std::exp(-12.0)), 1e-12);
  EXPECT_NEAR(p(0), 0.999994, 1e-6);
}

TEST(ClassProbabilities, InvariantUnderCommonRotation) {
  Rng rng = make_rng({12});
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix text = normalize_columns(gaussian_matrix(rng, 8, 5, 1.0));
    const Vector z = normalize_columns(gaussian_matrix(rng, 8, 1, 1.0));
    const Matrix q = random_rotation(rng, 8);
    const Vector a = class_probabilities(z, text, 0.1);
    const Vector b = class_probabilities(q * z, q * text, 0.1);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Embeddings, AlwaysUnitNorm) {
  Rng rng = make_rng({13});
  for (int trial = 0; trial < 30; ++trial) {
    const EncoderStack s = testutil::random_stack(rng, 8, 2);
    const Matrix z = encode_images(s, gaussian_matrix(rng, 8, 10, 2.0), gaussian_matrix(rng, 8, 10, 0.5));
    for (Eigen::Index i = 0; i < z.cols(); ++i) EXPECT_NEAR(z.col(i).norm(), 1.0, 1e-9);
    const ClassTextBank bank(static_cast<std::uint64_t>(trial), 6, 8);
    const Matrix t = encode_all_text(s, bank);
    for (Eigen::Index c = 0; c < t.cols(); ++c) EXPECT_NEAR(t.col(c).norm(), 1.0, 1e-9);
  }
}

TEST(InitPretrainedLike, ZeroPerturbationGivesIdentityStacks) {
  ModelDims dims;
  const DualEncoder m = init_pretrained_like(3, dims, 0.05, 0.0);
  for (const EncoderStack* s : {&m.image, &m.text}) {
    ASSERT_EQ(s->layers().size(), 2u);
    for (const LoraLinear& l : s->layers()) EXPECT_EQ(l.w0, Matrix::Identity(16, 16));
  }
}

TEST(InitPretrainedLike, ZeroPerturbationClassifiesNoiselessSamplesPerfectly) {
  ModelDims dims;
  const DualEncoder m = init_pretrained_like(3, dims, 0.05, 0.0);
  DataSpec spec;
  spec.num_classes = 10;
  spec.noise = 0.0;
  spec.domain_mix = 0.0;
  spec.domain_shift = 0.0;
  spec.seed = 3;
  const SyntheticData data = generate_synthetic(spec);
  std::vector<int> all(10);
  std::iota(all.begin(), all.end(), 0);
  const auto acc = accuracy(encode_images(m.image, data.test.features), data.test.labels,
                            encode_all_text(m.text, data.bank), all, m.tau);
  EXPECT_EQ(acc.value(), 1.0);
}

TEST(InitPretrainedLike, DefaultScaleZeroShotAboveNinetyPercent) {
  // samples on the prototypes: no domain transform
  for (std::uint64_t seed : {1, 2, 3}) {
    ModelDims dims;
    const DualEncoder m = init_pretrained_like(seed, dims, 0.05);
    DataSpec spec;
    spec.num_classes = 10;
    spec.noise = 0.0;
    spec.domain_mix = 0.0;
    spec.domain_shift = 0.0;
    spec.seed = seed;
    const SyntheticData data = generate_synthetic(spec);
    std::vector<int> all(10);
    std::iota(all.begin(), all.end(), 0);
    const auto acc = accuracy(encode_images(m.image, data.test.features), data.test.labels,
                              encode_all_text(m.text, data.bank), all, m.tau);
    EXPECT_GT(acc.value(), 0.9) << "seed " << seed;
  }
}

TEST(InitPretrainedLike, LoraDeltasStartAtZeroAndOutputsMatchFrozenBackbone) {
  Rng rng = make_rng({14});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelDims dims;
    const DualEncoder m = init_pretrained_like(seed, dims, 0.05);
    for (const EncoderStack* s : {&m.image, &m.text}) {
      EXPECT_TRUE(s->trainable());
      std::vector<LoraLinear> frozen;
      for (const LoraLinear& l : s->layers()) {
        if (l.trainable()) {
          EXPECT_EQ(l.b, Matrix::Zero(l.b.rows(), l.b.cols()));
          EXPECT_EQ((l.b * l.a), Matrix::Zero(l.out_dim(), l.in_dim()));
        }
        frozen.emplace_back(l.w0, 0);
      }
      const Matrix x = gaussian_matrix(rng, 16, 8, 1.0);
      EXPECT_EQ(s->forward(x), EncoderStack(std::move(frozen)).forward(x));
    }
  }
}

TEST(InitPretrainedLike, LoraOnlyFromStartLayer) {
  ModelDims dims;
  dims.layers = 3;
  dims.lora_start = 1;
  const DualEncoder m = init_pretrained_like(1, dims, 0.05);
  EXPECT_FALSE(m.image.layers()[0].trainable());
  EXPECT_EQ(m.image.layers()[1].rank(), 4);
  EXPECT_EQ(m.image.layers()[2].rank(), 4);
}

TEST(InitPretrainedLike, RejectsInvalidDims) {
  ModelDims dims;
  dims.input_dim = 8;
  EXPECT_THROW(init_pretrained_like(1, dims, 0.05), ConfigError);
  ModelDims d2;
  d2.lora_start = 2;
  EXPECT_THROW(init_pretrained_like(1, d2, 0.05), ConfigError);
  ModelDims d3;
  EXPECT_THROW(init_pretrained_like(1, d3, 0.0), ConfigError);
  ModelDims d4;
  d4.lora_rank = 9;
  EXPECT_THROW(init_pretrained_like(1, d4, 0.05), ConfigError);
}
