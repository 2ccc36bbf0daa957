// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/commands.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualfed/gradcheck.hpp"
#include "dualfed/serialization.hpp"

namespace dualfed {

std::string resolve_output_dir(const RunConfig& cfg) {
  const char* env = std::getenv(kOutputDirEnv);
  if (env != nullptr && *env != '\0') return env;
  return cfg.output_dir;
}

RunConfig apply_variant(const RunConfig& base, const std::string& variant) {
  RunConfig cfg = base;
  if (variant == "base") return cfg;
  if (variant == "sft_rl") {
    cfg.train.schedule = Schedule::kSftRl;
  } else if (variant == "sft_only") {
    cfg.train.schedule = Schedule::kSftOnly;
  } else if (variant == "rl_only") {
    cfg.train.schedule = Schedule::kRlOnly;
  } else if (variant == "ref_mix") {
    cfg.reference = ReferenceMode::kMix;
  } else if (variant == "ref_latest") {
    cfg.reference = ReferenceMode::kLatest;
  } else if (variant == "ref_final_sft") {
    cfg.reference = ReferenceMode::kFinalSft;
  } else if (variant == "decoupled_on") {
    cfg.train.decoupled = true;
  } else if (variant == "decoupled_off") {
    cfg.train.decoupled = false;
  } else if (variant == "fedlora") {
    cfg.train.decoupled = false;
    cfg.train.schedule = Schedule::kSftOnly;
  } else if (variant == "grpo" || variant == "dr_grpo" || variant == "gmpo" || variant == "dapo" ||
             variant == "liteppo") {
    cfg.rl.variant = parse_rl_variant(variant);
  } else if (variant.find('=') != std::string::npos) {
    std::stringstream ss(variant);
    std::string item;
    while (std::getline(ss, item, ';')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("variant '" + variant + "': expected key=value");
      apply_setting(cfg, item.substr(0, eq), item.substr(eq + 1));
    }
  } else {
    throw ConfigError("unknown variant '" + variant + "'");
  }
  return cfg;
}

void write_metrics_csv(std::ostream& out, const ExperimentResult& result, int num_domains) {
  write_metrics_header(out, num_domains);
  for (const RoundMetrics& m : result.history) write_metrics_row(out, m, num_domains);
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "none";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

void metric_line(std::ostream& out, const char* label, const RoundMetrics& m) {
  out << "# " << label << " local_acc=" << fmt(m.local_accuracy) << " base_acc=" << fmt(m.base_accuracy)
      << " novel_acc=" << fmt(m.novel_accuracy) << " hm=" << fmt(m.hm) << '\n';
}

int fail(std::ostream& err, const char* code, int exit_code, const std::string& what) {
  std::string line = what;
  for (char& c : line) {
    if (c == '\n') c = ' ';
  }
  err << "error code=" << code << ": " << line << '\n';
  return exit_code;
}

// Maps exceptions to the documented exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    return fail(err, "validation", kExitValidation, e.what());
  } catch (const IoError& e) {
    return fail(err, "io", kExitRuntime, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(err, "io", kExitRuntime, e.what());
  } catch (const std::exception& e) {
    return fail(err, "runtime", kExitRuntime, e.what());
  }
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  return out;
}

}  // namespace

void write_summary(std::ostream& out, const RunConfig& cfg, const ExperimentResult& result, double wall_seconds) {
  out << "# clients=" << result.num_clients << " rounds=" << result.history.size() << '\n';
  out << "# transition_round=" << (result.transition_round ? std::to_string(*result.transition_round) : "none")
      << '\n';
  metric_line(out, "zero_shot", result.zero_shot);
  if (!result.history.empty()) metric_line(out, "final", result.history.back());
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", wall_seconds);
  out << "# wall_seconds=" << buf << '\n';
  for (const std::string& w : result.warnings) out << "# warning: " << w << '\n';
  write_config(out, cfg);
}

int cmd_run(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_config(config_path);
    cfg.output_dir = resolve_output_dir(cfg);
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const ExperimentResult result = run_experiment(cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const std::filesystem::path dir(cfg.output_dir);
    std::filesystem::create_directories(dir);
    {
      auto f = open_out(dir / "metrics.csv");
      write_metrics_csv(f, result, cfg.data.num_domains);
    }
    {
      auto f = open_out(dir / "summary.txt");
      write_summary(f, cfg, result, wall);
    }
    write_file((dir / "image_lora.bin").string(), serialize_lora(result.final_image_lora));
    write_file((dir / "text_lora.bin").string(), serialize_lora(result.final_text_lora));
    for (const std::string& w : result.warnings) err << "warning: " << w << '\n';
    out << "wrote " << result.history.size() << " rounds to " << dir.string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_gradcheck(const std::vector<std::string>& which, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<GradLoss> losses;
    if (which.empty()) {
      losses = all_grad_losses();
    } else {
      for (const std::string& w : which) losses.push_back(parse_grad_loss(w));
    }
    bool ok = true;
    for (GradLoss l : losses) {
      const GradcheckReport r = gradcheck(l, seed);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3e", r.max_relative_error);
      out << to_string(l) << " instances=" << r.instances << " max_rel_err=" << buf << ' '
          << (r.passed() ? "PASS" : "FAIL") << '\n';
      ok = ok && r.passed();
    }
    return static_cast<int>(ok ? kExitOk : kExitThreshold);
  });
}

int cmd_partition(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_config(config_path);
    cfg.validate();
    const SyntheticData data = generate_synthetic(cfg.effective_data());
    const ClassSplit split = split_base_novel(cfg.data.num_classes, cfg.data.base_fraction);
    const Dataset train = restrict_to_classes(data.train, split.base);
    write_partition_csv(out, train, partition(train, cfg.partition, cfg.seed));
    return static_cast<int>(kExitOk);
  });
}

int cmd_compare(const std::string& config_path, const std::vector<std::string>& variants, std::ostream& out,
                std::ostream& err) {
  return guarded(err, [&] {
    RunConfig base = load_config(config_path);
    base.output_dir = resolve_output_dir(base);
    base.validate();
    if (variants.empty()) throw ConfigError("compare: no variants given");

    std::ostringstream table;
    table << "variant,status,transition_round,local_acc,base_acc,novel_acc,hm\n";
    bool all_ok = true;
    for (const std::string& v : variants) {
      table << v << ',';
      try {
        const RunConfig cfg = apply_variant(base, v);
        const ExperimentResult r = run_experiment(cfg);
        const RoundMetrics& m = r.history.empty() ? r.zero_shot : r.history.back();
        auto cell = [](const std::optional<double>& x) { return x ? fmt(x) : std::string(); };
        table << "ok," << (r.transition_round ? std::to_string(*r.transition_round) : "") << ','
              << cell(m.local_accuracy) << ',' << cell(m.base_accuracy) << ',' << cell(m.novel_accuracy) << ','
              << cell(m.hm) << '\n';
      } catch (const std::exception& e) {
        all_ok = false;
        table << "failed,,,,,\n";
        fail(err, "runtime", kExitRuntime, "variant " + v + ": " + e.what());
      }
    }
    const std::filesystem::path dir(base.output_dir);
    std::filesystem::create_directories(dir);
    {
      auto f = open_out(dir / "comparison.csv");
      f << table.str();
    }
    out << table.str();
    return static_cast<int>(all_ok ? kExitOk : kExitRuntime);
  });
}

}  // namespace dualfed
