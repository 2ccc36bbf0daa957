// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/local_training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dualfed {

std::string to_string(RlVariant v) {
  switch (v) {
    case RlVariant::kGrpo: return "grpo";
    case RlVariant::kDrGrpo: return "dr_grpo";
    case RlVariant::kGmpo: return "gmpo";
    case RlVariant::kDapo: return "dapo";
    case RlVariant::kLitePpo: return "liteppo";
  }
  return "?";
}

RlVariant parse_rl_variant(const std::string& s) {
  if (s == "grpo") return RlVariant::kGrpo;
  if (s == "dr_grpo") return RlVariant::kDrGrpo;
  if (s == "gmpo") return RlVariant::kGmpo;
  if (s == "dapo") return RlVariant::kDapo;
  if (s == "liteppo") return RlVariant::kLitePpo;
  throw ConfigError("unknown RL variant '" + s + "'");
}

double RlConfig::low() const { return eps_low.value_or(clip_eps); }
double RlConfig::high() const { return eps_high.value_or(clip_eps); }

void RlConfig::validate() const {
  if (group_size < 2) throw ConfigError("rl.group_size must be >= 2");
  if (!(sigma > 0.0)) throw ConfigError("rl.sigma must be > 0");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("rl.clip_eps must lie in (0, 1)");
  if (!(beta >= 0.0)) throw ConfigError("rl.beta must be >= 0");
  if (!(low() > 0.0 && low() < 1.0)) throw ConfigError("rl.eps_low must lie in (0, 1)");
  if (!(high() > 0.0)) throw ConfigError("rl.eps_high must be > 0");
  if (epochs < 0) throw ConfigError("rl.epochs must be >= 0");
}

LocalTask LocalTask::batch(const std::vector<std::size_t>& indices) const {
  LocalTask out;
  out.features.resize(features.rows(), static_cast<Eigen::Index>(indices.size()));
  out.targets.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.features.col(static_cast<Eigen::Index>(i)) = features.col(static_cast<Eigen::Index>(indices[i]));
    out.targets.push_back(targets.at(indices[i]));
  }
  return out;
}

Matrix policy_log_probs(const EncoderStack& image, const Matrix& features, const Matrix& text_embs,
                        double tau) {
  const Matrix z = normalize_columns(image.forward(features));
  return log_softmax_columns(text_embs.transpose() * z, tau);
}

Tape::Var policy_log_probs(Tape& tape, const EncoderStack& image,
                           const std::vector<Tape::Var>& lora_leaves, const Matrix& features,
                           const Matrix& text_embs, double tau) {
  const Tape::Var latent = image.forward(tape, tape.constant(features), lora_leaves);
  const Tape::Var z = tape.normalize_columns(latent);
  const Tape::Var sims = tape.matmul(tape.constant(text_embs.transpose()), z);
  return tape.log_softmax_columns(sims, tau);
}

Tape::Var cross_entropy(Tape& tape, Tape::Var log_probs, const std::vector<int>& targets) {
  Eigen::MatrixXi index(1, static_cast<Eigen::Index>(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) index(0, static_cast<Eigen::Index>(i)) = targets[i];
  return tape.scale(tape.mean(tape.gather(log_probs, index)), -1.0);
}

namespace {

int sample_categorical(const Eigen::Ref<const Vector>& p, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    acc += p(c);
    if (u < acc) return static_cast<int>(c);
  }
  // u landed in the rounding gap above the cumulative sum: take the last
  // class with non-zero mass
  for (Eigen::Index c = p.size(); c-- > 0;) {
    if (p(c) > 0.0) return static_cast<int>(c);
  }
  return 0;
}

std::vector<int> argmax_columns(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    Eigen::Index best = 0;
    m.col(j).maxCoeff(&best);
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

double accuracy_of(const Matrix& log_probs, const std::vector<int>& targets) {
  const auto pred = argmax_columns(log_probs);
  int hit = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) hit += pred[i] == targets[i];
  return targets.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(targets.size());
}

double spread(const Eigen::Ref<const Eigen::ArrayXd>& v, StdKind kind) {
  const double n = static_cast<double>(v.size());
  const double mean = v.mean();
  const double ss = (v - mean).square().sum();
  const double denom = (kind == StdKind::kSample && n > 1.0) ? n - 1.0 : n;
  return std::sqrt(ss / denom);
}

void require_finite(Tape& tape, Tape::Var v, const char* term) {
  if (!tape.value(v).allFinite()) throw NumericError(std::string("rl_loss: non-finite ") + term);
}

}  // namespace

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t lo = 0; lo < n; lo += bs) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(lo),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, lo + bs)));
  }
  return out;
}

SampleGroups sample_actions(const EncoderStack& old_policy, const LocalTask& batch,
                            const Matrix& text_embs, double tau, int group_size, double sigma,
                            Rng& rng) {
  if (!(sigma > 0.0)) throw ConfigError("sample_actions: sigma must be > 0");
  if (group_size < 1) throw ConfigError("sample_actions: group size must be >= 1");
  const Matrix latent = old_policy.forward(batch.features);
  const auto bs = latent.cols();
  SampleGroups s;
  s.actions.resize(group_size, bs);
  s.old_probs.resize(group_size, bs);
  s.noises.reserve(static_cast<std::size_t>(group_size));
  for (int j = 0; j < group_size; ++j) {
    Matrix noise = gaussian_matrix(rng, latent.rows(), bs, sigma);
    const Matrix probs = softmax_columns(text_embs.transpose() * normalize_columns(latent + noise), tau);
    for (Eigen::Index i = 0; i < bs; ++i) {
      const int a = sample_categorical(probs.col(i), rng);
      s.actions(j, i) = a;
      s.old_probs(j, i) = probs(a, i);
    }
    s.noises.push_back(std::move(noise));
  }
  return s;
}

Matrix compute_rewards(const Eigen::MatrixXi& actions, const std::vector<int>& targets) {
  if (static_cast<std::size_t>(actions.cols()) != targets.size()) {
    throw ShapeError("compute_rewards: one label per image required");
  }
  Matrix r(actions.rows(), actions.cols());
  for (Eigen::Index i = 0; i < actions.cols(); ++i) {
    for (Eigen::Index j = 0; j < actions.rows(); ++j) {
      r(j, i) = actions(j, i) == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    }
  }
  return r;
}

Matrix group_advantages(const Matrix& rewards, RlVariant variant, StdKind std_kind) {
  if (rewards.rows() < 2) throw ConfigError("group_advantages: group size must be >= 2");
  constexpr double kZeroStd = 1e-12;
  Matrix adv(rewards.rows(), rewards.cols());
  const double batch_std = spread(rewards.reshaped().array(), std_kind);
  for (Eigen::Index i = 0; i < rewards.cols(); ++i) {
    const Eigen::ArrayXd r = rewards.col(i).array();
    const Eigen::ArrayXd centered = r - r.mean();
    double denom = 1.0;
    switch (variant) {
      case RlVariant::kDrGrpo:
        denom = 1.0;
        break;
      case RlVariant::kLitePpo:
        denom = batch_std;
        break;
      default:
        denom = spread(r, std_kind);
        break;
    }
    if (variant != RlVariant::kDrGrpo && denom < kZeroStd) {
      adv.col(i).setZero();
    } else {
      adv.col(i) = (centered / denom).matrix();
    }
  }
  return adv;
}

double clipped_policy_term(double rho, double advantage, double eps_low, double eps_high) {
  const double clipped = std::clamp(rho, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(rho * advantage, clipped * advantage);
}

double kl_estimate(double p_ref, double p_cur) {
  if (p_cur < 1e-300) throw NumericError("kl_estimate: current probability is degenerate");
  if (!(p_ref > 0.0)) throw NumericError("kl_estimate: reference probability must be positive");
  const double q = p_ref / p_cur;
  return q - std::log(q) - 1.0;
}

double gmpo_policy_aggregate(const Matrix& terms, const Matrix& advantages) {
  if (terms.rows() != advantages.rows() || terms.cols() != advantages.cols()) {
    throw ShapeError("gmpo_policy_aggregate: shape mismatch");
  }
  const double bs = static_cast<double>(terms.cols());
  double total = 0.0;
  for (Eigen::Index j = 0; j < terms.rows(); ++j) {
    for (const double sign : {1.0, -1.0}) {
      double log_sum = 0.0;
      int count = 0;
      for (Eigen::Index i = 0; i < terms.cols(); ++i) {
        if (advantages(j, i) * sign > 0.0) {
          log_sum += std::log(std::abs(terms(j, i)));
          ++count;
        }
      }
      if (count > 0) total += sign * (count / bs) * std::exp(log_sum / count);
    }
  }
  return total;
}

Tape::Var rl_loss(Tape& tape, Tape::Var current_log_probs, const SampleGroups& samples,
                  const Matrix& reference_log_probs, const RlConfig& cfg) {
  const Matrix& cur = tape.value(current_log_probs);
  if (reference_log_probs.rows() != cur.rows() || reference_log_probs.cols() != cur.cols()) {
    throw ShapeError("rl_loss: reference log-probabilities do not match the current policy");
  }
  if (samples.actions.cols() != cur.cols()) throw ShapeError("rl_loss: batch size mismatch");
  const Eigen::Index g = samples.actions.rows();
  const Eigen::Index bs = samples.actions.cols();

  // log pi_theta(a_ij | x_i), noise-free
  const Tape::Var logp = tape.gather(current_log_probs, samples.actions);
  Matrix inv_old = samples.old_probs.cwiseInverse();
  const Tape::Var rho = tape.cwise_product(tape.exp(logp), inv_old);
  const Tape::Var unclipped = tape.cwise_product(rho, samples.advantages);
  const Tape::Var clipped =
      tape.cwise_product(tape.clamp(rho, 1.0 - cfg.low(), 1.0 + cfg.high()), samples.advantages);
  const Tape::Var policy = tape.minimum(unclipped, clipped);
  require_finite(tape, policy, "clipped policy term");

  Matrix ref_gathered(g, bs);
  for (Eigen::Index i = 0; i < bs; ++i) {
    for (Eigen::Index j = 0; j < g; ++j) ref_gathered(j, i) = reference_log_probs(samples.actions(j, i), i);
  }
  // KL = q - log q - 1 with log q = log pi_ref - log pi_theta
  const Tape::Var log_q = tape.sub(tape.constant(ref_gathered), logp);
  const Tape::Var kl = tape.add_scalar(tape.sub(tape.exp(log_q), log_q), -1.0);
  require_finite(tape, kl, "KL term");

  Tape::Var loss;
  switch (cfg.variant) {
    case RlVariant::kGrpo:
    case RlVariant::kDapo:
    case RlVariant::kLitePpo:
      // -(1/G) sum_j (1/bs) sum_i (...) and -(1/sum_j bs_j) sum_ij (...) coincide
      loss = tape.scale(tape.mean(tape.sub(policy, tape.scale(kl, cfg.beta))), -1.0);
      break;
    case RlVariant::kDrGrpo:
      loss = tape.scale(tape.sum(tape.sub(policy, tape.scale(kl, cfg.beta))),
                        -1.0 / static_cast<double>(g));
      break;
    case RlVariant::kGmpo: {
      Tape::Var aggregate = tape.constant(Matrix::Zero(1, 1));
      for (const double sign : {1.0, -1.0}) {
        const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
            (samples.advantages.array() * sign) > 0.0;
        Matrix inv_count = Matrix::Zero(g, 1);
        Matrix weight = Matrix::Zero(g, 1);
        for (Eigen::Index j = 0; j < g; ++j) {
          const double n = static_cast<double>(mask.row(j).count());
          if (n > 0) {
            inv_count(j) = 1.0 / n;
            weight(j) = sign * n / static_cast<double>(bs);
          }
        }
        const Tape::Var mean_log = tape.cwise_product(tape.row_sums(tape.masked_log_abs(policy, mask)), inv_count);
        aggregate = tape.add(aggregate, tape.sum(tape.cwise_product(tape.exp(mean_log), weight)));
      }
      // -(1/G) (L_p - beta * sum_j (1/bs) sum_i KL)
      loss = tape.add(tape.scale(aggregate, -1.0 / static_cast<double>(g)),
                      tape.scale(tape.mean(kl), cfg.beta));
      break;
    }
  }
  if (!std::isfinite(tape.scalar(loss))) throw NumericError("rl_loss: non-finite loss");
  return loss;
}

SftStats sft_epoch(EncoderStack& image, AdamState& adam, const LocalTask& task,
                   const Matrix& text_embs, double tau, double learning_rate, int batch_size,
                   Rng& rng) {
  if (batch_size < 1) throw ConfigError("sft_epoch: batch size must be >= 1");
  SftStats stats;
  double loss_sum = 0.0;
  double hits = 0.0;
  std::size_t seen = 0;
  for (const auto& idx : shuffled_batches(task.size(), batch_size, rng)) {
    LocalTask batch = task.batch(idx);
    // drop samples whose latent collapses to zero
    const Matrix latent = image.forward(batch.features);
    std::vector<std::size_t> keep;
    for (Eigen::Index i = 0; i < latent.cols(); ++i) {
      if (latent.col(i).norm() >= 1e-12) keep.push_back(static_cast<std::size_t>(i));
    }
    stats.degenerate_samples += static_cast<int>(latent.cols()) - static_cast<int>(keep.size());
    if (keep.empty()) continue;
    if (keep.size() != batch.size()) batch = batch.batch(keep);

    Tape tape;
    const auto leaves = image.register_lora(tape);
    const Tape::Var logp = policy_log_probs(tape, image, leaves, batch.features, text_embs, tau);
    const Tape::Var loss = cross_entropy(tape, logp, batch.targets);
    const double l = tape.scalar(loss);
    const auto n = static_cast<double>(batch.size());
    hits += accuracy_of(tape.value(logp), batch.targets) * n;
    seen += batch.size();
    ++stats.steps;
    if (!std::isfinite(l)) {
      ++stats.skipped_steps;
      continue;
    }
    loss_sum += l * n;
    tape.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(leaves.size());
    for (const auto& leaf : leaves) grads.push_back(tape.grad(leaf));
    if (!adam_step(image.lora_parameters(), grads, adam, learning_rate)) ++stats.skipped_steps;
  }
  if (seen > 0) {
    stats.mean_loss = loss_sum / static_cast<double>(seen);
    stats.accuracy = hits / static_cast<double>(seen);
  }
  return stats;
}

RlStats rl_batch_update(EncoderStack& image, AdamState& adam, const LocalTask& batch,
                        const Matrix& text_embs, double tau, const PolicySnapshot& reference,
                        const RlConfig& cfg, double learning_rate, Rng& rng) {
  RlStats stats;
  SampleGroups samples = sample_actions(image, batch, text_embs, tau, cfg.group_size, cfg.sigma, rng);
  samples.rewards = compute_rewards(samples.actions, batch.targets);
  samples.advantages = group_advantages(samples.rewards, cfg.variant, cfg.std_kind);
  stats.mean_reward = samples.rewards.mean();

  EncoderStack ref_stack = image;
  ref_stack.set_lora(reference.delta());
  const Matrix ref_log_probs = policy_log_probs(ref_stack, batch.features, text_embs, tau);
  stats.accuracy = accuracy_of(policy_log_probs(image, batch.features, text_embs, tau), batch.targets);

  double loss_sum = 0.0;
  int finite_steps = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    ++stats.steps;
    Tape tape;
    const auto leaves = image.register_lora(tape);
    try {
      const Tape::Var logp = policy_log_probs(tape, image, leaves, batch.features, text_embs, tau);
      const Tape::Var loss = rl_loss(tape, logp, samples, ref_log_probs, cfg);
      tape.backward(loss);
      loss_sum += tape.scalar(loss);
      ++finite_steps;
    } catch (const NumericError&) {
      ++stats.skipped_steps;
      continue;
    }
    std::vector<Matrix> grads;
    grads.reserve(leaves.size());
    for (const auto& leaf : leaves) grads.push_back(tape.grad(leaf));
    if (!adam_step(image.lora_parameters(), grads, adam, learning_rate)) ++stats.skipped_steps;
  }
  stats.mean_loss = finite_steps > 0 ? loss_sum / finite_steps : 0.0;
  return stats;
}

RlStats rl_epoch(EncoderStack& image, AdamState& adam, const LocalTask& task,
                 const Matrix& text_embs, double tau, const PolicySnapshot& reference,
                 const RlConfig& cfg, double learning_rate, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("rl_epoch: batch size must be >= 1");
  RlStats total;
  double loss_sum = 0.0;
  double acc_sum = 0.0;
  double reward_sum = 0.0;
  std::size_t seen = 0;
  for (const auto& idx : shuffled_batches(task.size(), batch_size, rng)) {
    const LocalTask batch = task.batch(idx);
    const RlStats s = rl_batch_update(image, adam, batch, text_embs, tau, reference, cfg, learning_rate, rng);
    const auto n = static_cast<double>(batch.size());
    loss_sum += s.mean_loss * n;
    acc_sum += s.accuracy * n;
    reward_sum += s.mean_reward * n;
    seen += batch.size();
    total.steps += s.steps;
    total.skipped_steps += s.skipped_steps;
  }
  if (seen > 0) {
    total.mean_loss = loss_sum / static_cast<double>(seen);
    total.accuracy = acc_sum / static_cast<double>(seen);
    total.mean_reward = reward_sum / static_cast<double>(seen);
  }
  return total;
}

std::string to_string(ReferenceMode m) {
  switch (m) {
    case ReferenceMode::kMix: return "mix";
    case ReferenceMode::kLatest: return "latest";
    case ReferenceMode::kFinalSft: return "final_sft";
  }
  return "?";
}

ReferenceMode parse_reference_mode(const std::string& s) {
  if (s == "mix") return ReferenceMode::kMix;
  if (s == "latest") return ReferenceMode::kLatest;
  if (s == "final_sft") return ReferenceMode::kFinalSft;
  throw ConfigError("unknown reference mode '" + s + "'");
}

PolicySnapshot build_reference(const LoraDelta& final_sft, const LoraDelta& latest,
                               ReferenceMode mode) {
  final_sft.require_same_shape(latest, "build_reference");
  switch (mode) {
    case ReferenceMode::kLatest:
      return PolicySnapshot(PolicySnapshot::Role::kReference, latest);
    case ReferenceMode::kFinalSft:
      return PolicySnapshot(PolicySnapshot::Role::kReference, final_sft);
    case ReferenceMode::kMix:
      break;
  }
  LoraDelta mix = final_sft.scaled(0.5);
  mix.add_scaled(latest, 0.5);
  return PolicySnapshot(PolicySnapshot::Role::kReference, std::move(mix));
}

StageController::StageController(double eps_acc, int required_rounds, std::optional<int> fixed_round)
    : eps_acc_(eps_acc), required_rounds_(required_rounds), fixed_round_(fixed_round) {
  if (!(eps_acc >= 0.0)) throw ConfigError("stage.eps_acc must be >= 0");
  if (required_rounds < 1) throw ConfigError("stage.required_rounds must be >= 1");
  if (fixed_round && *fixed_round < 0) throw ConfigError("stage.fixed_m must be >= 0");
  if (fixed_round && *fixed_round == 0) {
    stage_ = Stage::kRl;
    transition_round_ = 0;
  }
}

bool StageController::should_transition(double mean_accuracy) {
  if (stage_ == Stage::kRl) throw std::logic_error("StageController: already in the RL stage");
  history_.push_back(mean_accuracy);
  const int t = static_cast<int>(history_.size());
  bool fire = fixed_round_ && *fixed_round_ == t;
  if (!fire && t > required_rounds_) {
    fire = true;
    for (int k = 0; k < required_rounds_; ++k) {
      const std::size_t i = history_.size() - 1 - static_cast<std::size_t>(k);
      if (!(std::abs(history_[i] - history_[i - 1]) < eps_acc_)) {
        fire = false;
        break;
      }
    }
  }
  if (fire) {
    stage_ = Stage::kRl;
    transition_round_ = t;
  }
  return fire;
}

}  // namespace dualfed
