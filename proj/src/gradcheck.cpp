// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/gradcheck.hpp"

#include <algorithm>
#include <functional>

#include "dualfed/errors.hpp"
#include "dualfed/federation.hpp"
#include "dualfed/local_training.hpp"
#include "dualfed/numerics.hpp"
#include "dualfed/rng.hpp"

namespace dualfed {

std::string to_string(GradLoss l) {
  switch (l) {
    case GradLoss::kCe: return "ce";
    case GradLoss::kGrpo: return "grpo";
    case GradLoss::kDrGrpo: return "dr_grpo";
    case GradLoss::kGmpo: return "gmpo";
    case GradLoss::kDapo: return "dapo";
    case GradLoss::kLitePpo: return "liteppo";
    case GradLoss::kText: return "text";
  }
  return "?";
}

GradLoss parse_grad_loss(const std::string& s) {
  for (GradLoss l : all_grad_losses()) {
    if (to_string(l) == s) return l;
  }
  throw ConfigError("unknown gradient check '" + s + "'");
}

const std::vector<GradLoss>& all_grad_losses() {
  static const std::vector<GradLoss> all = {GradLoss::kCe,   GradLoss::kGrpo,    GradLoss::kDrGrpo,
                                            GradLoss::kGmpo, GradLoss::kDapo,    GradLoss::kLitePpo,
                                            GradLoss::kText};
  return all;
}

namespace {

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
double uniform_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

EncoderStack random_stack(Rng& rng, Eigen::Index d, Eigen::Index rank) {
  std::vector<LoraLinear> layers;
  for (int l = 0; l < 2; ++l) {
    LoraLinear layer(Matrix::Identity(d, d) + gaussian_matrix(rng, d, d, 0.3), rank);
    layer.a = gaussian_matrix(rng, rank, d, 0.5);
    layer.b = gaussian_matrix(rng, d, rank, 0.5);
    layers.push_back(std::move(layer));
  }
  return EncoderStack(std::move(layers));
}

LoraDelta jitter(const LoraDelta& base, Rng& rng, double stddev) {
  LoraDelta out = base;
  for (Matrix* m : out.matrices()) *m += gaussian_matrix(rng, m->rows(), m->cols(), stddev);
  return out;
}

std::vector<int> random_targets(Rng& rng, int n, int classes) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int& v : t) v = uniform_int(rng, 0, classes - 1);
  return t;
}

RlVariant variant_of(GradLoss l) {
  switch (l) {
    case GradLoss::kDrGrpo: return RlVariant::kDrGrpo;
    case GradLoss::kGmpo: return RlVariant::kGmpo;
    case GradLoss::kDapo: return RlVariant::kDapo;
    case GradLoss::kLitePpo: return RlVariant::kLitePpo;
    default: return RlVariant::kGrpo;
  }
}

}  // namespace

double gradcheck_instance(GradLoss loss, std::uint64_t seed, int instance) {
  Rng rng = make_rng({seed, 0x6772616463686bULL, static_cast<std::uint64_t>(loss),
                      static_cast<std::uint64_t>(instance)});
  const Eigen::Index d = 2 * uniform_int(rng, 2, 3);
  const Eigen::Index rank = uniform_int(rng, 1, static_cast<int>(d / 2));
  const int classes = uniform_int(rng, 2, 4);
  const int n = uniform_int(rng, 2, 4);
  const double tau = uniform_real(rng, 0.3, 1.0);

  EncoderStack stack = random_stack(rng, d, rank);
  const Matrix text_embs = normalize_columns(gaussian_matrix(rng, d, classes, 1.0));
  LocalTask task;
  task.features = gaussian_matrix(rng, d, n, 1.0);
  task.targets = random_targets(rng, n, classes);

  // builds the loss on a fresh tape for the given stack
  std::function<Tape::Var(Tape&, const EncoderStack&, const std::vector<Tape::Var>&)> build;

  SampleGroups samples;
  Matrix ref_log_probs;
  RlConfig cfg;
  Matrix raw_text;
  Matrix uploads;

  if (loss == GradLoss::kCe) {
    build = [&](Tape& tape, const EncoderStack& s, const std::vector<Tape::Var>& leaves) {
      return cross_entropy(tape, policy_log_probs(tape, s, leaves, task.features, text_embs, tau), task.targets);
    };
  } else if (loss == GradLoss::kText) {
    raw_text = normalize_columns(gaussian_matrix(rng, d, classes, 1.0));
    uploads = normalize_columns(gaussian_matrix(rng, d, n, 1.0));
    build = [&](Tape& tape, const EncoderStack& s, const std::vector<Tape::Var>& leaves) {
      return text_objective(tape, s, leaves, raw_text, uploads, task.targets, tau);
    };
  } else {
    cfg.variant = variant_of(loss);
    cfg.group_size = uniform_int(rng, 2, 3);
    cfg.beta = uniform_real(rng, 0.1, 1.0);
    if (loss == GradLoss::kDapo) {
      cfg.eps_low = 0.2;
      cfg.eps_high = 0.28;
    }
    EncoderStack old_policy = stack;
    old_policy.set_lora(jitter(stack.lora(), rng, 0.05));
    samples = sample_actions(old_policy, task, text_embs, tau, cfg.group_size, 0.3, rng);
    samples.rewards = compute_rewards(samples.actions, task.targets);
    samples.advantages = group_advantages(samples.rewards, cfg.variant, cfg.std_kind);
    EncoderStack ref = stack;
    ref.set_lora(jitter(stack.lora(), rng, 0.1));
    ref_log_probs = policy_log_probs(ref, task.features, text_embs, tau);
    build = [&](Tape& tape, const EncoderStack& s, const std::vector<Tape::Var>& leaves) {
      return rl_loss(tape, policy_log_probs(tape, s, leaves, task.features, text_embs, tau), samples,
                     ref_log_probs, cfg);
    };
  }

  Tape tape;
  const auto leaves = stack.register_lora(tape);
  const Tape::Var l = build(tape, stack, leaves);
  tape.backward(l);
  const LoraDelta params = stack.lora();
  Vector analytic(params.parameter_count());
  Eigen::Index offset = 0;
  for (const auto& leaf : leaves) {
    const Matrix g = tape.grad(leaf);
    analytic.segment(offset, g.size()) = g.reshaped();
    offset += g.size();
  }

  auto f = [&](const Vector& flat) {
    LoraDelta delta = params;
    delta.assign_flat(flat);
    EncoderStack probe = stack;
    probe.set_lora(delta);
    Tape t;
    const auto lv = probe.register_lora(t);
    return t.scalar(build(t, probe, lv));
  };
  const Vector numeric = finite_diff_gradient(f, params.flatten(), 1e-5);
  return max_relative_error(analytic, numeric, 1e-8);
}

GradcheckReport gradcheck(GradLoss loss, std::uint64_t seed, int instances) {
  GradcheckReport report{loss, instances, 0.0};
  for (int i = 0; i < instances; ++i) {
    report.max_relative_error = std::max(report.max_relative_error, gradcheck_instance(loss, seed, i));
  }
  return report;
}

}  // namespace dualfed
