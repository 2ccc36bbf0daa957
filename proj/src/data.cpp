// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace dualfed {

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.features.resize(features.rows(), static_cast<Eigen::Index>(indices.size()));
  out.labels.reserve(indices.size());
  out.domains.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= size()) throw std::out_of_range("Dataset::subset: index out of range");
    out.features.col(static_cast<Eigen::Index>(i)) = features.col(static_cast<Eigen::Index>(src));
    out.labels.push_back(labels[src]);
    out.domains.push_back(domains[src]);
  }
  return out;
}

std::vector<int> Dataset::present_classes() const {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::vector<std::size_t> Dataset::indices_of_class(int class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == class_id) out.push_back(i);
  }
  return out;
}

void DataSpec::validate() const {
  if (num_classes < 1) throw ConfigError("data.num_classes must be >= 1");
  if (!(base_fraction > 0.0 && base_fraction <= 1.0)) {
    throw ConfigError("data.base_fraction must lie in (0, 1]");
  }
  if (samples_per_class < 1) throw ConfigError("data.samples_per_class must be >= 1");
  if (test_samples_per_class < 1) throw ConfigError("data.test_samples_per_class must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("data.noise must be >= 0");
  if (num_domains < 1) throw ConfigError("data.num_domains must be >= 1");
  if (!(domain_mix >= 0.0 && domain_mix <= 1.0)) throw ConfigError("data.domain_mix must lie in [0, 1]");
  if (!(domain_shift >= 0.0)) throw ConfigError("data.domain_shift must be >= 0");
  if (dim < 1) throw ConfigError("data dimension must be >= 1");
}

Matrix DomainTransform::apply(const Matrix& x) const {
  return (linear * x).colwise() + shift;
}

DomainTransform make_domain_transform(const DataSpec& spec, int domain) {
  Rng rng = make_rng({spec.seed, key(Stream::kDomain), static_cast<std::uint64_t>(domain)});
  const Eigen::Index d = spec.dim;
  const Matrix g = gaussian_matrix(rng, d, d, 1.0);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  DomainTransform t;
  t.linear = (1.0 - spec.domain_mix) * Matrix::Identity(d, d) + spec.domain_mix * q;
  Vector dir = gaussian_matrix(rng, d, 1, 1.0);
  t.shift = spec.domain_shift * dir / dir.norm();
  return t;
}

namespace {

Dataset sample_split(const DataSpec& spec, const ClassTextBank& bank,
                     const std::vector<DomainTransform>& domains, int per_class, Stream stream) {
  const auto n = static_cast<Eigen::Index>(spec.num_domains) * spec.num_classes * per_class;
  Dataset out;
  out.features.resize(spec.dim, n);
  out.labels.reserve(static_cast<std::size_t>(n));
  out.domains.reserve(static_cast<std::size_t>(n));
  Eigen::Index col = 0;
  for (int d = 0; d < spec.num_domains; ++d) {
    for (int c = 0; c < spec.num_classes; ++c) {
      Rng rng = make_rng({spec.seed, key(stream), static_cast<std::uint64_t>(d),
                          static_cast<std::uint64_t>(c)});
      Matrix x = gaussian_matrix(rng, spec.dim, per_class, spec.noise);
      x.colwise() += bank.matrix().col(c);
      out.features.middleCols(col, per_class) = domains[d].apply(x);
      col += per_class;
      for (int i = 0; i < per_class; ++i) {
        out.labels.push_back(c);
        out.domains.push_back(d);
      }
    }
  }
  return out;
}

// Gamma-based Dirichlet draw; redraws in the (rare) all-underflow case.
std::vector<double> dirichlet(Rng& rng, int k, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(static_cast<std::size_t>(k));
  for (int attempt = 0; attempt < 100; ++attempt) {
    double total = 0.0;
    for (auto& v : p) {
      v = gamma(rng);
      total += v;
    }
    if (total > 0.0 && std::isfinite(total)) {
      for (auto& v : p) v /= total;
      return p;
    }
  }
  // alpha so small that every draw underflowed: all mass on one client
  std::uniform_int_distribution<int> pick(0, k - 1);
  std::fill(p.begin(), p.end(), 0.0);
  p[static_cast<std::size_t>(pick(rng))] = 1.0;
  return p;
}

std::vector<Shard> split_iid(const std::vector<std::size_t>& pool, int k, Rng& rng) {
  std::vector<std::size_t> order = pool;
  shuffle_in_place(order, rng);
  std::vector<Shard> shards(static_cast<std::size_t>(k));
  const std::size_t n = order.size();
  for (int c = 0; c < k; ++c) {
    const std::size_t lo = n * static_cast<std::size_t>(c) / static_cast<std::size_t>(k);
    const std::size_t hi = n * static_cast<std::size_t>(c + 1) / static_cast<std::size_t>(k);
    shards[c].assign(order.begin() + static_cast<std::ptrdiff_t>(lo),
                     order.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return shards;
}

std::vector<Shard> split_dirichlet(const Dataset& data, const std::vector<std::size_t>& pool, int k,
                                   double alpha, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : pool) by_class[data.labels[i]].push_back(i);
  std::vector<Shard> shards(static_cast<std::size_t>(k));
  for (auto& [cls, members] : by_class) {
    const std::vector<double> p = dirichlet(rng, k, alpha);
    std::discrete_distribution<int> choose(p.begin(), p.end());
    for (std::size_t i : members) shards[static_cast<std::size_t>(choose(rng))].push_back(i);
  }
  return shards;
}

std::vector<Shard> split_disjoint(const Dataset& data, const std::vector<std::size_t>& pool, int k) {
  std::set<int> classes;
  for (std::size_t i : pool) classes.insert(data.labels[i]);
  const std::vector<int> sorted(classes.begin(), classes.end());
  const std::size_t per_client = sorted.size() / static_cast<std::size_t>(k);
  std::map<int, std::size_t> owner;
  for (std::size_t j = 0; j < sorted.size(); ++j) {
    // contiguous blocks first, leftovers round-robin
    owner[sorted[j]] = (j < per_client * k) ? j / per_client : j - per_client * k;
  }
  std::vector<Shard> shards(static_cast<std::size_t>(k));
  for (std::size_t i : pool) shards[owner[data.labels[i]]].push_back(i);
  return shards;
}

std::vector<Shard> partition_once(const Dataset& data, const PartitionSpec& spec, Rng& rng) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  switch (spec.scheme) {
    case PartitionScheme::kIid:
      return split_iid(all, spec.num_clients, rng);
    case PartitionScheme::kDirichlet:
      return split_dirichlet(data, all, spec.num_clients, spec.alpha, rng);
    case PartitionScheme::kNonIidDisjoint:
      return split_disjoint(data, all, spec.num_clients);
    case PartitionScheme::kFeatureShift: {
      const int num_domains = data.empty() ? 0 : *std::max_element(data.domains.begin(), data.domains.end()) + 1;
      std::vector<Shard> shards;
      for (int d = 0; d < num_domains; ++d) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < data.size(); ++i) {
          if (data.domains[i] == d) pool.push_back(i);
        }
        std::vector<Shard> part;
        switch (spec.within) {
          case WithinDomain::kOne:
            part = {pool};
            break;
          case WithinDomain::kIid:
            part = split_iid(pool, spec.clients_per_domain, rng);
            break;
          case WithinDomain::kDirichlet:
            part = split_dirichlet(data, pool, spec.clients_per_domain, spec.alpha, rng);
            break;
        }
        for (auto& s : part) shards.push_back(std::move(s));
      }
      return shards;
    }
  }
  return {};
}

}  // namespace

SyntheticData generate_synthetic(const DataSpec& spec) {
  spec.validate();
  SyntheticData out;
  out.bank = ClassTextBank(spec.seed, spec.num_classes, spec.dim);
  for (int d = 0; d < spec.num_domains; ++d) out.domains.push_back(make_domain_transform(spec, d));
  out.train = sample_split(spec, out.bank, out.domains, spec.samples_per_class, Stream::kTrainSamples);
  out.test = sample_split(spec, out.bank, out.domains, spec.test_samples_per_class, Stream::kTestSamples);
  return out;
}

ClassSplit split_base_novel(int num_classes, double fraction) {
  if (num_classes < 1 || !(fraction > 0.0 && fraction <= 1.0) || fraction * num_classes < 1.0) {
    throw ConfigError("split_base_novel: need fraction * num_classes >= 1");
  }
  // guard against 0.5 * 10 = 5.000000000001 style rounding
  const int base = std::min(num_classes, static_cast<int>(std::ceil(fraction * num_classes - 1e-9)));
  ClassSplit split;
  for (int c = 0; c < num_classes; ++c) (c < base ? split.base : split.novel).push_back(c);
  return split;
}

Dataset restrict_to_classes(const Dataset& data, const std::vector<int>& classes) {
  const std::set<int> keep(classes.begin(), classes.end());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (keep.count(data.labels[i])) idx.push_back(i);
  }
  return data.subset(idx);
}

std::string to_string(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::kIid: return "iid";
    case PartitionScheme::kDirichlet: return "dirichlet";
    case PartitionScheme::kNonIidDisjoint: return "noniid_disjoint";
    case PartitionScheme::kFeatureShift: return "feature_shift";
  }
  return "?";
}

std::string to_string(WithinDomain w) {
  switch (w) {
    case WithinDomain::kOne: return "one";
    case WithinDomain::kIid: return "iid";
    case WithinDomain::kDirichlet: return "dirichlet";
  }
  return "?";
}

PartitionScheme parse_partition_scheme(const std::string& s) {
  if (s == "iid") return PartitionScheme::kIid;
  if (s == "dirichlet") return PartitionScheme::kDirichlet;
  if (s == "noniid_disjoint") return PartitionScheme::kNonIidDisjoint;
  if (s == "feature_shift") return PartitionScheme::kFeatureShift;
  throw ConfigError("unknown partition scheme '" + s + "'");
}

WithinDomain parse_within_domain(const std::string& s) {
  if (s == "one") return WithinDomain::kOne;
  if (s == "iid") return WithinDomain::kIid;
  if (s == "dirichlet") return WithinDomain::kDirichlet;
  throw ConfigError("unknown within-domain scheme '" + s + "'");
}

int PartitionSpec::expected_clients(int num_domains) const {
  if (scheme != PartitionScheme::kFeatureShift) return num_clients;
  return within == WithinDomain::kOne ? num_domains : num_domains * clients_per_domain;
}

void PartitionSpec::validate(int num_domains) const {
  if (num_clients < 1) throw ConfigError("partition.clients must be >= 1");
  if (uses_alpha() && !(alpha > 0.0)) throw ConfigError("partition.alpha must be > 0");
  if (shots && *shots < 1) throw ConfigError("partition.shots must be >= 1");
  if (scheme == PartitionScheme::kFeatureShift) {
    if (clients_per_domain < 1) throw ConfigError("partition.clients_per_domain must be >= 1");
    if (num_clients != expected_clients(num_domains)) {
      throw ConfigError("partition.clients must equal " + std::to_string(expected_clients(num_domains)) +
                        " for feature_shift with " + std::to_string(num_domains) + " domains");
    }
  }
}

std::vector<Shard> partition(const Dataset& data, const PartitionSpec& spec, std::uint64_t seed) {
  if (spec.num_clients < 1) throw ConfigError("partition: need at least one client");
  for (std::uint64_t attempt = 0; attempt < 10; ++attempt) {
    Rng rng = make_rng({seed, key(Stream::kPartition), attempt});
    std::vector<Shard> shards = partition_once(data, spec, rng);
    if (spec.shots) {
      for (std::size_t k = 0; k < shards.size(); ++k) {
        shards[k] = few_shot_subsample(data, shards[k], *spec.shots, seed ^ (0x9e3779b97f4a7c15ULL * (k + 1)));
      }
    }
    const bool ok = !shards.empty() &&
                    std::none_of(shards.begin(), shards.end(), [](const Shard& s) { return s.empty(); });
    if (ok) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
    if (spec.scheme == PartitionScheme::kNonIidDisjoint || spec.scheme == PartitionScheme::kIid) break;
  }
  throw ConfigError("partition: a client shard stayed empty after retries (" + to_string(spec.scheme) +
                    ", " + std::to_string(spec.num_clients) + " clients, " +
                    std::to_string(data.size()) + " samples)");
}

Shard few_shot_subsample(const Dataset& data, const Shard& shard, int shots, std::uint64_t seed) {
  if (shots < 1) throw ConfigError("few_shot_subsample: shots must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : shard) by_class[data.labels.at(i)].push_back(i);
  Shard out;
  for (auto& [cls, members] : by_class) {
    if (static_cast<int>(members.size()) > shots) {
      Rng rng = make_rng({seed, key(Stream::kShots), static_cast<std::uint64_t>(cls)});
      shuffle_in_place(members, rng);
      members.resize(static_cast<std::size_t>(shots));
    }
    out.insert(out.end(), members.begin(), members.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_partition_csv(std::ostream& out, const Dataset& data, const std::vector<Shard>& shards) {
  out << "client_id,class_id,count\n";
  for (std::size_t k = 0; k < shards.size(); ++k) {
    std::map<int, std::size_t> counts;
    for (std::size_t i : shards[k]) ++counts[data.labels.at(i)];
    for (const auto& [cls, n] : counts) out << k << ',' << cls << ',' << n << '\n';
  }
}

}  // namespace dualfed
