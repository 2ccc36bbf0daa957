// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dualfed/adam.hpp"
#include "dualfed/encoders.hpp"
#include "dualfed/lora.hpp"
#include "dualfed/rng.hpp"
#include "dualfed/tape.hpp"

namespace dualfed {

enum class RlVariant { kGrpo, kDrGrpo, kGmpo, kDapo, kLitePpo };
enum class StdKind { kPopulation, kSample };

std::string to_string(RlVariant v);
RlVariant parse_rl_variant(const std::string& s);

struct RlConfig {
  int group_size = 3;
  double sigma = 0.1;
  double clip_eps = 0.2;
  double beta = 0.5;
  RlVariant variant = RlVariant::kGrpo;
  // asymmetric thresholds for gmpo/dapo; default to clip_eps
  std::optional<double> eps_low;
  std::optional<double> eps_high;
  int epochs = 3;
  StdKind std_kind = StdKind::kPopulation;

  double low() const;
  double high() const;
  void validate() const;
};

/// Local training data in the coordinates of a candidate class list: `targets`
/// are column indices into the text-embedding matrix used for the softmax.
struct LocalTask {
  Matrix features;  // input_dim x n
  std::vector<int> targets;

  std::size_t size() const { return targets.size(); }
  LocalTask batch(const std::vector<std::size_t>& indices) const;
};

/// Frozen copy of image-encoder LoRA parameters.
class PolicySnapshot {
 public:
  enum class Role { kOld, kReference, kFinalSft };

  PolicySnapshot(Role role, LoraDelta delta) : role_(role), delta_(std::move(delta)) {}
  Role role() const { return role_; }
  const LoraDelta& delta() const { return delta_; }

 private:
  Role role_;
  LoraDelta delta_;
};

/// G sampled actions for each image of a batch. Column i is image i, row j is
/// the j-th sample of its group.
struct SampleGroups {
  Eigen::MatrixXi actions;     // G x bs, target indices
  Matrix old_probs;            // pi_old(a_ij | x_i, eps_ij)
  std::vector<Matrix> noises;  // G entries of embed_dim x bs
  Matrix rewards;              // G x bs, 0/1
  Matrix advantages;           // G x bs

  int group_size() const { return static_cast<int>(actions.rows()); }
  int batch_size() const { return static_cast<int>(actions.cols()); }
};

// Column-wise log-probabilities over candidates for a fixed encoder (no tape).
Matrix policy_log_probs(const EncoderStack& image, const Matrix& features, const Matrix& text_embs,
                        double tau);
// Same on a tape, differentiable in the LoRA leaves.
Tape::Var policy_log_probs(Tape& tape, const EncoderStack& image,
                           const std::vector<Tape::Var>& lora_leaves, const Matrix& features,
                           const Matrix& text_embs, double tau);

// Shuffled index batches covering 0..n-1; the last one may be short.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, int batch_size, Rng& rng);

// Mean cross-entropy of the target rows.
Tape::Var cross_entropy(Tape& tape, Tape::Var log_probs, const std::vector<int>& targets);

// Noise is drawn in latent space and only used here; sampled actions come from
// the old (current, frozen) policy with noise.
SampleGroups sample_actions(const EncoderStack& old_policy, const LocalTask& batch,
                            const Matrix& text_embs, double tau, int group_size, double sigma,
                            Rng& rng);

// r_ij = 1 when a_ij equals the label of image i.
Matrix compute_rewards(const Eigen::MatrixXi& actions, const std::vector<int>& targets);

// Groups are columns. grpo/gmpo/dapo: (r - mean) / std_group; dr_grpo: r - mean;
// liteppo: (r - mean) / std_batch. A zero std yields zero advantages.
Matrix group_advantages(const Matrix& rewards, RlVariant variant,
                        StdKind std_kind = StdKind::kPopulation);

// min(rho * A, clip(rho, 1 - low, 1 + high) * A)
double clipped_policy_term(double rho, double advantage, double eps_low, double eps_high);
inline double clipped_policy_term(double rho, double advantage, double eps) {
  return clipped_policy_term(rho, advantage, eps, eps);
}

// q - ln q - 1 with q = p_ref / p_cur. Throws NumericError when p_cur < 1e-300.
double kl_estimate(double p_ref, double p_cur);

// GMPO aggregate sum_j sum_sign sign * (n_js / bs) * geomean_{i in S_js} |term_ij|
// over instances with non-zero advantage.
double gmpo_policy_aggregate(const Matrix& terms, const Matrix& advantages);

// RL objective for one batch. `current_log_probs` is C x bs on the tape;
// `reference_log_probs` is the noise-free reference policy.
Tape::Var rl_loss(Tape& tape, Tape::Var current_log_probs, const SampleGroups& samples,
                  const Matrix& reference_log_probs, const RlConfig& cfg);

struct SftStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
  int steps = 0;
  int skipped_steps = 0;
  int degenerate_samples = 0;
};

// One shuffled pass of minibatch cross-entropy + Adam over the task.
SftStats sft_epoch(EncoderStack& image, AdamState& adam, const LocalTask& task,
                   const Matrix& text_embs, double tau, double learning_rate, int batch_size,
                   Rng& rng);

struct RlStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;      // noise-free old-policy accuracy on the batches
  double mean_reward = 0.0;
  int steps = 0;
  int skipped_steps = 0;
};

// Freezes pi_old, samples once, computes advantages once, then takes
// cfg.epochs Adam steps on the fixed sample set.
RlStats rl_batch_update(EncoderStack& image, AdamState& adam, const LocalTask& batch,
                        const Matrix& text_embs, double tau, const PolicySnapshot& reference,
                        const RlConfig& cfg, double learning_rate, Rng& rng);

// One shuffled pass of rl_batch_update over the task.
RlStats rl_epoch(EncoderStack& image, AdamState& adam, const LocalTask& task,
                 const Matrix& text_embs, double tau, const PolicySnapshot& reference,
                 const RlConfig& cfg, double learning_rate, int batch_size, Rng& rng);

enum class ReferenceMode { kMix, kLatest, kFinalSft };
std::string to_string(ReferenceMode m);
ReferenceMode parse_reference_mode(const std::string& s);

// mix: 0.5 * (final_sft + latest); otherwise a copy of the named source.
PolicySnapshot build_reference(const LoraDelta& final_sft, const LoraDelta& latest,
                               ReferenceMode mode);

/// SFT -> RL switch: fires once the server-averaged training accuracy moved by
/// less than eps_acc for `required_rounds` consecutive rounds, or at the
/// configured fixed round. Never reverts.
class StageController {
 public:
  enum class Stage { kSft, kRl };

  StageController(double eps_acc = 0.003, int required_rounds = 2,
                  std::optional<int> fixed_round = std::nullopt);

  Stage stage() const { return stage_; }
  std::optional<int> transition_round() const { return transition_round_; }
  const std::vector<double>& history() const { return history_; }

  // Records the mean training accuracy of the next round. Throws
  // std::logic_error once the stage is already RL.
  bool should_transition(double mean_accuracy);

 private:
  double eps_acc_;
  int required_rounds_;
  std::optional<int> fixed_round_;
  std::vector<double> history_;
  Stage stage_ = Stage::kSft;
  std::optional<int> transition_round_;
};

}  // namespace dualfed
