// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "dualfed/numerics.hpp"

namespace dualfed {

using Rng = std::mt19937_64;

// Independent stream keyed by a tuple (e.g. seed, purpose, client, round), so
// results never depend on the order streams are consumed in.
Rng make_rng(std::initializer_list<std::uint64_t> keys);

// Purpose tags mixed into stream keys.
enum class Stream : std::uint64_t {
  kClassBank = 1,
  kDomain = 2,
  kTrainSamples = 3,
  kTestSamples = 4,
  kPartition = 5,
  kShots = 6,
  kInit = 7,
  kClientRound = 8,
  kUpload = 9,
  kServer = 10,
};

inline std::uint64_t key(Stream s) { return static_cast<std::uint64_t>(s); }

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev);

// Fisher-Yates shuffle driven by our own engine (std::shuffle's use of the
// engine is implementation-defined).
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

}  // namespace dualfed
