// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dualfed/encoders.hpp"
#include "dualfed/numerics.hpp"
#include "dualfed/rng.hpp"

namespace dualfed {

/// Column-per-sample feature matrix with parallel label and domain arrays.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::vector<int> domains;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  Dataset subset(const std::vector<std::size_t>& indices) const;
  // sorted, unique
  std::vector<int> present_classes() const;
  std::vector<std::size_t> indices_of_class(int class_id) const;
};

struct DataSpec {
  int num_classes = 16;
  double base_fraction = 0.5;
  int samples_per_class = 100;       // per class and per domain
  int test_samples_per_class = 50;   // per class and per domain
  double noise = 0.2;                // intra-class standard deviation s
  int num_domains = 1;
  double domain_mix = 0.5;           // blend of identity toward a random rotation
  double domain_shift = 0.3;         // norm of the per-domain offset
  Eigen::Index dim = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DomainTransform {
  Matrix linear;
  Vector shift;

  Matrix apply(const Matrix& x) const;
};

struct SyntheticData {
  ClassTextBank bank;
  std::vector<DomainTransform> domains;
  Dataset train;
  Dataset test;
};

// x = T_d(t_c + N(0, s^2 I)), T_d(v) = ((1 - mix) I + mix Q_d) v + shift_d.
SyntheticData generate_synthetic(const DataSpec& spec);
DomainTransform make_domain_transform(const DataSpec& spec, int domain);

struct ClassSplit {
  std::vector<int> base;
  std::vector<int> novel;
};

// The first ceil(fraction * C) class ids are base classes.
ClassSplit split_base_novel(int num_classes, double fraction);

Dataset restrict_to_classes(const Dataset& data, const std::vector<int>& classes);

enum class PartitionScheme { kIid, kDirichlet, kNonIidDisjoint, kFeatureShift };
enum class WithinDomain { kOne, kIid, kDirichlet };

std::string to_string(PartitionScheme s);
std::string to_string(WithinDomain w);
PartitionScheme parse_partition_scheme(const std::string& s);
WithinDomain parse_within_domain(const std::string& s);

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::kIid;
  int num_clients = 5;
  double alpha = 0.1;
  WithinDomain within = WithinDomain::kOne;
  int clients_per_domain = 3;
  std::optional<int> shots;

  // Client count implied by the scheme; feature shift derives it from domains.
  int expected_clients(int num_domains) const;
  bool uses_alpha() const {
    return scheme == PartitionScheme::kDirichlet ||
           (scheme == PartitionScheme::kFeatureShift && within == WithinDomain::kDirichlet);
  }
  void validate(int num_domains) const;
};

// Indices into the partitioned dataset.
using Shard = std::vector<std::size_t>;

// Splits `data` (already restricted to base classes) into client shards.
// Retries with a fresh sub-seed up to 10 times when a shard comes out empty,
// then throws ConfigError.
std::vector<Shard> partition(const Dataset& data, const PartitionSpec& spec, std::uint64_t seed);

// Keeps at most `shots` uniformly chosen samples of each class in the shard;
// preserves index order.
Shard few_shot_subsample(const Dataset& data, const Shard& shard, int shots, std::uint64_t seed);

// Rows of (client_id, class_id, count) for every non-zero pair.
void write_partition_csv(std::ostream& out, const Dataset& data, const std::vector<Shard>& shards);

}  // namespace dualfed
