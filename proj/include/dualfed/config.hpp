// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>

#include "dualfed/data.hpp"
#include "dualfed/encoders.hpp"
#include "dualfed/local_training.hpp"

namespace dualfed {

enum class Schedule { kSftRl, kSftOnly, kRlOnly };
std::string to_string(Schedule s);
Schedule parse_schedule(const std::string& s);

struct UploadPolicy {
  double ratio = 1.0;                 // uniform subsample of ceil(ratio * N_k)
  std::optional<int> per_class_cap;   // at most n per present class
  std::optional<double> noise_sigma;  // Gaussian perturbation of each upload
  std::optional<int> groups;          // per-class group means instead of raw embeddings

  void validate() const;
};

struct TrainConfig {
  int rounds = 20;
  int sft_epochs = 2;
  double learning_rate = 1e-3;
  int batch_size = 64;
  Schedule schedule = Schedule::kSftRl;
  bool decoupled = true;       // server-side text encoder training
  int server_epochs = 1;
  double participation = 1.0;
  int parallelism = 1;
};

struct StageConfig {
  double eps_acc = 0.003;
  int required_rounds = 2;
  std::optional<int> fixed_m;
};

struct ModelConfig {
  Eigen::Index input_dim = 16;
  Eigen::Index hidden_dim = 16;
  Eigen::Index embed_dim = 16;
  int layers = 2;
  int lora_rank = 4;
  int lora_start = 1;
  double init_scale = 0.02;
  double tau = 0.05;

  ModelDims dims() const;
};

/// Every knob of one experiment. Defaults follow the reference setup
/// (K=5, T=20, lr 1e-3, bs 64, r=4, G=3, sigma 0.1, clip 0.2, beta 0.5,
/// T_r=2, eps_acc 0.003) on a 16-class synthetic task.
struct RunConfig {
  std::uint64_t seed = 1;
  DataSpec data;
  PartitionSpec partition;
  ModelConfig model;
  TrainConfig train;
  RlConfig rl;
  ReferenceMode reference = ReferenceMode::kMix;
  StageConfig stage;
  UploadPolicy upload;
  std::string output_dir = "out";

  // Enumerates every violated rule in one ConfigError.
  void validate() const;
  // data spec with the run seed and model input dimension applied
  DataSpec effective_data() const;
};

// Flat `key = value` text, '#' comments. Unknown keys and malformed values
// throw ConfigError.
RunConfig parse_config(std::istream& in);
RunConfig parse_config_string(const std::string& text);
RunConfig load_config(const std::string& path);  // IoError if unreadable
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// Canonical listing of every key; parse_config of the output reproduces cfg.
void write_config(std::ostream& out, const RunConfig& cfg);
std::string config_to_string(const RunConfig& cfg);

}  // namespace dualfed
