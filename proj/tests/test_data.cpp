// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "dualfed/data.hpp"
#include "dualfed/rng.hpp"

using namespace dualfed;

namespace {

DataSpec flat_spec(int classes, double noise, std::uint64_t seed = 1) {
  DataSpec s;
  s.num_classes = classes;
  s.noise = noise;
  s.domain_mix = 0.0;
  s.domain_shift = 0.0;
  s.seed = seed;
  return s;
}

// Labels only; features are irrelevant to partitioning.
Dataset labelled(int classes, int per_class, int domains = 1) {
  Dataset d;
  d.features = Matrix::Zero(1, static_cast<Eigen::Index>(classes) * per_class * domains);
  for (int dom = 0; dom < domains; ++dom) {
    for (int c = 0; c < classes; ++c) {
      for (int i = 0; i < per_class; ++i) {
        d.labels.push_back(c);
        d.domains.push_back(dom);
      }
    }
  }
  return d;
}

void expect_conserving_and_disjoint(const Dataset& data, const std::vector<Shard>& shards) {
  std::vector<int> seen(data.size(), 0);
  for (const Shard& s : shards) {
    for (std::size_t i : s) {
      ASSERT_LT(i, data.size());
      ++seen[i];
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(seen[i], 1) << "sample " << i;
}

std::set<int> label_set(const Dataset& data, const Shard& s) {
  std::set<int> out;
  for (std::size_t i : s) out.insert(data.labels[i]);
  return out;
}

}  // namespace

TEST(GenerateSynthetic, NoiselessSingleDomainSamplesAreThePrototypes) {
  const SyntheticData d = generate_synthetic(flat_spec(6, 0.0));
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    EXPECT_EQ(d.train.features.col(static_cast<Eigen::Index>(i)), d.bank.raw(d.train.labels[i]));
  }
}

TEST(GenerateSynthetic, ClassMeansWithinThreeStandardErrors) {
  const DataSpec spec = flat_spec(16, 0.2);
  const SyntheticData d = generate_synthetic(spec);
  const double se = spec.noise / std::sqrt(static_cast<double>(spec.samples_per_class));
  for (int c = 0; c < spec.num_classes; ++c) {
    Vector mean = Vector::Zero(spec.dim);
    const auto idx = d.train.indices_of_class(c);
    for (std::size_t i : idx) mean += d.train.features.col(static_cast<Eigen::Index>(i));
    mean /= static_cast<double>(idx.size());
    // per-coordinate RMS deviation
    const double rms = (mean - d.bank.raw(c)).norm() / std::sqrt(static_cast<double>(spec.dim));
    EXPECT_LT(rms, 3.0 * se) << "class " << c;
  }
}

TEST(GenerateSynthetic, DistinctDomainsShiftClassMeans) {
  DataSpec spec;
  spec.num_domains = 2;
  spec.seed = 5;
  const SyntheticData d = generate_synthetic(spec);
  for (int c = 0; c < spec.num_classes; ++c) {
    Vector m[2] = {Vector::Zero(spec.dim), Vector::Zero(spec.dim)};
    int n[2] = {0, 0};
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      if (d.train.labels[i] != c) continue;
      m[d.train.domains[i]] += d.train.features.col(static_cast<Eigen::Index>(i));
      ++n[d.train.domains[i]];
    }
    EXPECT_GT((m[0] / n[0] - m[1] / n[1]).norm(), 0.1) << "class " << c;
  }
}

TEST(GenerateSynthetic, DeterministicPerSeedAndShaped) {
  DataSpec spec;
  spec.seed = 9;
  spec.num_domains = 2;
  const SyntheticData a = generate_synthetic(spec);
  const SyntheticData b = generate_synthetic(spec);
  EXPECT_EQ(a.train.features, b.train.features);
  EXPECT_EQ(a.test.features, b.test.features);
  EXPECT_EQ(a.train.size(), static_cast<std::size_t>(2 * 16 * 100));
  EXPECT_EQ(a.test.size(), static_cast<std::size_t>(2 * 16 * 50));
  EXPECT_TRUE(a.train.features.allFinite());
  spec.seed = 10;
  EXPECT_NE(generate_synthetic(spec).train.features, a.train.features);
}

TEST(GenerateSynthetic, SamplesFollowTheDomainTransform) {
  DataSpec spec;
  spec.noise = 0.0;
  spec.seed = 4;
  const SyntheticData d = generate_synthetic(spec);
  const DomainTransform t = make_domain_transform(spec, 0);
  for (std::size_t i = 0; i < d.train.size(); i += 97) {
    const Matrix expected = t.apply(Matrix(d.bank.raw(d.train.labels[i])));
    EXPECT_LT((d.train.features.col(static_cast<Eigen::Index>(i)) - expected.col(0)).norm(), 1e-14);
  }
  EXPECT_NEAR(t.shift.norm(), spec.domain_shift, 1e-14);
}

TEST(DataSpec, ValidationRejectsBadValues) {
  DataSpec s;
  s.noise = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = DataSpec();
  s.base_fraction = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = DataSpec();
  s.domain_mix = 1.5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = DataSpec();
  s.num_domains = 0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(SplitBaseNovel, HalfOfTen) {
  const ClassSplit s = split_base_novel(10, 0.5);
  EXPECT_EQ(s.base, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(s.novel, (std::vector<int>{5, 6, 7, 8, 9}));
}

TEST(SplitBaseNovel, FullFractionLeavesNoNovel) {
  const ClassSplit s = split_base_novel(7, 1.0);
  EXPECT_EQ(s.base.size(), 7u);
  EXPECT_TRUE(s.novel.empty());
}

TEST(SplitBaseNovel, CeilingOnOddCount) {
  const ClassSplit s = split_base_novel(9, 0.5);
  EXPECT_EQ(s.base.size(), 5u);
  EXPECT_EQ(s.novel.size(), 4u);
}

TEST(SplitBaseNovel, RejectsEmptyBase) {
  EXPECT_THROW(split_base_novel(3, 0.2), ConfigError);
  EXPECT_THROW(split_base_novel(0, 0.5), ConfigError);
}

TEST(RestrictToClasses, KeepsOnlyListedClasses) {
  const Dataset d = labelled(6, 3);
  const Dataset r = restrict_to_classes(d, {1, 4});
  EXPECT_EQ(r.size(), 6u);
  EXPECT_EQ(r.present_classes(), (std::vector<int>{1, 4}));
}

TEST(Partition, IidSingleClientEqualsInput) {
  const Dataset d = labelled(5, 7);
  PartitionSpec spec;
  spec.num_clients = 1;
  const auto shards = partition(d, spec, 3);
  ASSERT_EQ(shards.size(), 1u);
  Shard all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(shards[0], all);
}

TEST(Partition, NonIidFourClassesTwoClients) {
  const Dataset d = labelled(4, 10);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kNonIidDisjoint;
  spec.num_clients = 2;
  const auto shards = partition(d, spec, 1);
  ASSERT_EQ(shards.size(), 2u);
  EXPECT_EQ(label_set(d, shards[0]), (std::set<int>{0, 1}));
  EXPECT_EQ(label_set(d, shards[1]), (std::set<int>{2, 3}));
}

TEST(Partition, NonIidRemainderClassesRoundRobin) {
  const Dataset d = labelled(7, 4);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kNonIidDisjoint;
  spec.num_clients = 3;
  const auto shards = partition(d, spec, 1);
  EXPECT_EQ(label_set(d, shards[0]), (std::set<int>{0, 1, 6}));
  EXPECT_EQ(label_set(d, shards[1]), (std::set<int>{2, 3}));
  EXPECT_EQ(label_set(d, shards[2]), (std::set<int>{4, 5}));
}

TEST(Partition, DirichletHugeAlphaGivesEqualShares) {
  const Dataset d = labelled(4, 1000);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kDirichlet;
  spec.alpha = 1e6;
  spec.num_clients = 5;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto shards = partition(d, spec, seed);
    for (const Shard& s : shards) {
      std::map<int, int> counts;
      for (std::size_t i : s) ++counts[d.labels[i]];
      for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(counts[c] / 1000.0, 0.2, 0.05) << "seed " << seed << " class " << c;
      }
    }
  }
}

TEST(Partition, SmallAlphaConcentratesClasses) {
  const Dataset d = labelled(10, 200);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kDirichlet;
  spec.alpha = 0.05;
  spec.num_clients = 5;
  const auto shards = partition(d, spec, 2);
  double top_share = 0.0;
  for (int c = 0; c < 10; ++c) {
    int best = 0;
    for (const Shard& s : shards) {
      int n = 0;
      for (std::size_t i : s) n += d.labels[i] == c;
      best = std::max(best, n);
    }
    top_share += best / 200.0 / 10.0;
  }
  EXPECT_GT(top_share, 0.6);
}

TEST(Partition, ConservationAndDisjointnessOnRandomConfigs) {
  Rng rng = make_rng({77});
  std::uniform_int_distribution<int> scheme(0, 3), clients(1, 6), classes(4, 12), per(5, 40), doms(1, 3);
  std::uniform_real_distribution<double> alpha(0.2, 5.0);
  int checked = 0;
  for (int trial = 0; checked < 50; ++trial) {
    ASSERT_LT(trial, 500);
    PartitionSpec spec;
    spec.scheme = static_cast<PartitionScheme>(scheme(rng));
    spec.num_clients = clients(rng);
    spec.alpha = alpha(rng);
    int num_domains = 1;
    if (spec.scheme == PartitionScheme::kFeatureShift) {
      num_domains = doms(rng);
      spec.within = static_cast<WithinDomain>(std::uniform_int_distribution<int>(0, 2)(rng));
      spec.clients_per_domain = std::uniform_int_distribution<int>(1, 3)(rng);
      spec.num_clients = spec.expected_clients(num_domains);
    }
    const int c = classes(rng);
    if (spec.scheme == PartitionScheme::kNonIidDisjoint && spec.num_clients > c) continue;
    const Dataset d = labelled(c, per(rng), num_domains);
    std::vector<Shard> shards;
    try {
      shards = partition(d, spec, static_cast<std::uint64_t>(trial));
    } catch (const ConfigError&) {
      continue;  // unlucky empty shard; rejection is the documented outcome
    }
    ASSERT_EQ(static_cast<int>(shards.size()), spec.num_clients);
    expect_conserving_and_disjoint(d, shards);
    if (spec.scheme == PartitionScheme::kNonIidDisjoint) {
      for (std::size_t a = 0; a < shards.size(); ++a) {
        for (std::size_t b = a + 1; b < shards.size(); ++b) {
          const auto la = label_set(d, shards[a]);
          for (int l : label_set(d, shards[b])) EXPECT_EQ(la.count(l), 0u);
        }
      }
    }
    ++checked;
  }
}

TEST(Partition, FeatureShiftAssignsWholeDomains) {
  const Dataset d = labelled(4, 5, 3);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kFeatureShift;
  spec.num_clients = 3;
  const auto shards = partition(d, spec, 1);
  ASSERT_EQ(shards.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(shards[k].size(), 20u);
    for (std::size_t i : shards[k]) EXPECT_EQ(d.domains[i], static_cast<int>(k));
  }
}

TEST(Partition, FeatureShiftWithinDomainSplitsEachDomain) {
  const Dataset d = labelled(4, 30, 2);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kFeatureShift;
  spec.within = WithinDomain::kIid;
  spec.clients_per_domain = 3;
  spec.num_clients = 6;
  const auto shards = partition(d, spec, 1);
  ASSERT_EQ(shards.size(), 6u);
  expect_conserving_and_disjoint(d, shards);
  for (std::size_t k = 0; k < 6; ++k) {
    for (std::size_t i : shards[k]) EXPECT_EQ(d.domains[i], static_cast<int>(k / 3));
  }
}

TEST(Partition, DeterministicPerSeed) {
  const Dataset d = labelled(6, 20);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kDirichlet;
  spec.alpha = 0.5;
  EXPECT_EQ(partition(d, spec, 4), partition(d, spec, 4));
  EXPECT_NE(partition(d, spec, 4), partition(d, spec, 5));
}

TEST(Partition, EmptyShardIsRejectedWithDiagnostic) {
  const Dataset d = labelled(2, 1);
  PartitionSpec spec;
  spec.num_clients = 3;
  try {
    partition(d, spec, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("empty"), std::string::npos);
  }
}

TEST(Partition, ValidationRules) {
  PartitionSpec spec;
  spec.num_clients = 0;
  EXPECT_THROW(spec.validate(1), ConfigError);
  spec = PartitionSpec();
  spec.scheme = PartitionScheme::kDirichlet;
  spec.alpha = 0.0;
  EXPECT_THROW(spec.validate(1), ConfigError);
  spec = PartitionSpec();
  spec.scheme = PartitionScheme::kFeatureShift;
  spec.num_clients = 2;
  EXPECT_THROW(spec.validate(3), ConfigError);
  spec.num_clients = 3;
  EXPECT_NO_THROW(spec.validate(3));
}

TEST(FewShot, ShotsAboveClassCountKeepShard) {
  const Dataset d = labelled(3, 5);
  Shard all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(few_shot_subsample(d, all, 5, 1), all);
  EXPECT_EQ(few_shot_subsample(d, all, 50, 1), all);
}

TEST(FewShot, SixteenOfHundred) {
  const Dataset d = labelled(2, 100);
  Shard all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Shard s = few_shot_subsample(d, all, 16, 3);
  std::map<int, int> counts;
  for (std::size_t i : s) ++counts[d.labels[i]];
  EXPECT_EQ(counts[0], 16);
  EXPECT_EQ(counts[1], 16);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), s.size());
}

TEST(FewShot, SameSeedSameSelection) {
  const Dataset d = labelled(3, 50);
  Shard all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(few_shot_subsample(d, all, 4, 8), few_shot_subsample(d, all, 4, 8));
  EXPECT_NE(few_shot_subsample(d, all, 4, 8), few_shot_subsample(d, all, 4, 9));
  EXPECT_THROW(few_shot_subsample(d, all, 0, 1), ConfigError);
}

TEST(FewShot, PartitionWithShotsCapsEveryClient) {
  const Dataset d = labelled(4, 60);
  PartitionSpec spec;
  spec.num_clients = 2;
  spec.shots = 5;
  for (const Shard& s : partition(d, spec, 1)) {
    std::map<int, int> counts;
    for (std::size_t i : s) ++counts[d.labels[i]];
    for (const auto& [c, n] : counts) EXPECT_LE(n, 5);
  }
}

TEST(PartitionCsv, CountsPerClientAndClass) {
  const Dataset d = labelled(4, 3);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::kNonIidDisjoint;
  spec.num_clients = 2;
  std::ostringstream out;
  write_partition_csv(out, d, partition(d, spec, 1));
  EXPECT_EQ(out.str(), "client_id,class_id,count\n0,0,3\n0,1,3\n1,2,3\n1,3,3\n");
}

TEST(Dataset, SubsetAndClassQueries) {
  const Dataset d = labelled(3, 2);
  const Dataset s = d.subset({5, 0});
  EXPECT_EQ(s.labels, (std::vector<int>{2, 0}));
  EXPECT_EQ(d.indices_of_class(1), (std::vector<std::size_t>{2, 3}));
  EXPECT_THROW(d.subset({6}), std::out_of_range);
}
