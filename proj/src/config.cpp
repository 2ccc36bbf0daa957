// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

namespace dualfed {

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::kSftRl: return "sft_rl";
    case Schedule::kSftOnly: return "sft_only";
    case Schedule::kRlOnly: return "rl_only";
  }
  return "?";
}

Schedule parse_schedule(const std::string& s) {
  if (s == "sft_rl") return Schedule::kSftRl;
  if (s == "sft_only") return Schedule::kSftOnly;
  if (s == "rl_only") return Schedule::kRlOnly;
  throw ConfigError("unknown schedule '" + s + "'");
}

void UploadPolicy::validate() const {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("upload.ratio must lie in (0, 1]");
  if (per_class_cap && *per_class_cap < 1) throw ConfigError("upload.per_class_cap must be >= 1");
  if (noise_sigma && !(*noise_sigma >= 0.0)) throw ConfigError("upload.noise_sigma must be >= 0");
  if (groups && *groups < 1) throw ConfigError("upload.groups must be >= 1");
}

ModelDims ModelConfig::dims() const {
  ModelDims d;
  d.input_dim = input_dim;
  d.text_dim = input_dim;
  d.embed_dim = embed_dim;
  d.layers = layers;
  d.lora_rank = lora_rank;
  d.lora_start = lora_start;
  return d;
}

DataSpec RunConfig::effective_data() const {
  DataSpec d = data;
  d.seed = seed;
  d.dim = model.input_dim;
  return d;
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  auto check = [&](const std::function<void()>& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      problems.emplace_back(e.what());
    }
  };
  check([&] { effective_data().validate(); });
  check([&] { partition.validate(data.num_domains); });
  check([&] { rl.validate(); });
  check([&] { upload.validate(); });
  check([&] { split_base_novel(data.num_classes, data.base_fraction); });
  check([&] {
    if (model.input_dim != model.embed_dim || model.hidden_dim != model.embed_dim) {
      throw ConfigError("model.input_dim, model.hidden_dim and model.embed_dim must be equal");
    }
    if (model.layers < 1) throw ConfigError("model.layers must be >= 1");
    if (model.lora_rank < 1 || 2 * model.lora_rank > model.embed_dim) {
      throw ConfigError("model.lora_rank must satisfy 1 <= r <= dim / 2");
    }
    if (model.lora_start < 0 || model.lora_start >= model.layers) {
      throw ConfigError("model.lora_start must index an existing layer");
    }
    if (!(model.init_scale >= 0.0)) throw ConfigError("model.init_scale must be >= 0");
    if (!(model.tau > 0.0)) throw ConfigError("model.tau must be > 0");
  });
  check([&] {
    if (train.rounds < 0) throw ConfigError("train.rounds must be >= 0");
    if (train.sft_epochs < 0) throw ConfigError("train.sft_epochs must be >= 0");
    if (!(train.learning_rate > 0.0)) throw ConfigError("train.lr must be > 0");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train.server_epochs < 0) throw ConfigError("train.server_epochs must be >= 0");
    if (!(train.participation > 0.0 && train.participation <= 1.0)) {
      throw ConfigError("train.participation must lie in (0, 1]");
    }
    if (train.parallelism < 1) throw ConfigError("train.parallelism must be >= 1");
  });
  check([&] {
    if (!(stage.eps_acc >= 0.0)) throw ConfigError("stage.eps_acc must be >= 0");
    if (stage.required_rounds < 1) throw ConfigError("stage.required_rounds must be >= 1");
    if (stage.fixed_m && *stage.fixed_m < 0) throw ConfigError("stage.fixed_m must be >= 0");
  });
  if (!problems.empty()) {
    std::string msg;
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw ConfigError(msg);
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_none(const std::string& v) { return v == "none" || v == "full"; }

double to_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno != 0 || !std::isfinite(d)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return d;
}

long long to_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno != 0) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return i;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string fmt(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

template <typename T>
std::string fmt_opt(const std::optional<T>& v) {
  if (!v) return "none";
  if constexpr (std::is_floating_point_v<T>) {
    return fmt(*v);
  } else {
    return std::to_string(*v);
  }
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DF_INT(KEY, MEMBER)                                                              \
  Field {                                                                                \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = static_cast<decltype(c.MEMBER)>(to_int(KEY, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                      \
  }
#define DF_REAL(KEY, MEMBER)                                                             \
  Field {                                                                                \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); },       \
        [](const RunConfig& c) { return fmt(c.MEMBER); }                                 \
  }
#define DF_OPT_INT(KEY, MEMBER)                                                          \
  Field {                                                                                \
    KEY,                                                                                 \
        [](RunConfig& c, const std::string& v) {                                         \
          if (is_none(v)) c.MEMBER.reset();                                              \
          else c.MEMBER = static_cast<int>(to_int(KEY, v));                              \
        },                                                                               \
        [](const RunConfig& c) { return fmt_opt(c.MEMBER); }                             \
  }
#define DF_OPT_REAL(KEY, MEMBER)                                                         \
  Field {                                                                                \
    KEY,                                                                                 \
        [](RunConfig& c, const std::string& v) {                                         \
          if (is_none(v)) c.MEMBER.reset();                                              \
          else c.MEMBER = to_double(KEY, v);                                             \
        },                                                                               \
        [](const RunConfig& c) { return fmt_opt(c.MEMBER); }                             \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](RunConfig& c, const std::string& v) {
              const long long s = to_int("seed", v);
              if (s < 0) throw ConfigError("seed must be >= 0");
              c.seed = static_cast<std::uint64_t>(s);
            },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      DF_INT("data.num_classes", data.num_classes),
      DF_REAL("data.base_fraction", data.base_fraction),
      DF_INT("data.samples_per_class", data.samples_per_class),
      DF_INT("data.test_samples_per_class", data.test_samples_per_class),
      DF_REAL("data.noise", data.noise),
      DF_INT("data.num_domains", data.num_domains),
      DF_REAL("data.domain_mix", data.domain_mix),
      DF_REAL("data.domain_shift", data.domain_shift),
      Field{"partition.scheme",
            [](RunConfig& c, const std::string& v) { c.partition.scheme = parse_partition_scheme(v); },
            [](const RunConfig& c) { return to_string(c.partition.scheme); }},
      DF_INT("partition.clients", partition.num_clients),
      DF_REAL("partition.alpha", partition.alpha),
      Field{"partition.within",
            [](RunConfig& c, const std::string& v) { c.partition.within = parse_within_domain(v); },
            [](const RunConfig& c) { return to_string(c.partition.within); }},
      DF_INT("partition.clients_per_domain", partition.clients_per_domain),
      DF_OPT_INT("partition.shots", partition.shots),
      DF_INT("model.input_dim", model.input_dim),
      DF_INT("model.hidden_dim", model.hidden_dim),
      DF_INT("model.embed_dim", model.embed_dim),
      DF_INT("model.layers", model.layers),
      DF_INT("model.lora_rank", model.lora_rank),
      DF_INT("model.lora_start", model.lora_start),
      DF_REAL("model.init_scale", model.init_scale),
      DF_REAL("model.tau", model.tau),
      DF_INT("train.rounds", train.rounds),
      DF_INT("train.sft_epochs", train.sft_epochs),
      DF_REAL("train.lr", train.learning_rate),
      DF_INT("train.batch_size", train.batch_size),
      Field{"train.schedule",
            [](RunConfig& c, const std::string& v) { c.train.schedule = parse_schedule(v); },
            [](const RunConfig& c) { return to_string(c.train.schedule); }},
      Field{"train.decoupled",
            [](RunConfig& c, const std::string& v) { c.train.decoupled = to_bool("train.decoupled", v); },
            [](const RunConfig& c) { return std::string(c.train.decoupled ? "true" : "false"); }},
      DF_INT("train.server_epochs", train.server_epochs),
      DF_REAL("train.participation", train.participation),
      DF_INT("train.parallelism", train.parallelism),
      DF_INT("rl.group_size", rl.group_size),
      DF_REAL("rl.sigma", rl.sigma),
      DF_REAL("rl.clip_eps", rl.clip_eps),
      DF_REAL("rl.beta", rl.beta),
      Field{"rl.variant", [](RunConfig& c, const std::string& v) { c.rl.variant = parse_rl_variant(v); },
            [](const RunConfig& c) { return to_string(c.rl.variant); }},
      DF_OPT_REAL("rl.eps_low", rl.eps_low),
      DF_OPT_REAL("rl.eps_high", rl.eps_high),
      DF_INT("rl.epochs", rl.epochs),
      Field{"rl.std",
            [](RunConfig& c, const std::string& v) {
              if (v == "population") c.rl.std_kind = StdKind::kPopulation;
              else if (v == "sample") c.rl.std_kind = StdKind::kSample;
              else throw ConfigError("rl.std: expected population or sample, got '" + v + "'");
            },
            [](const RunConfig& c) {
              return std::string(c.rl.std_kind == StdKind::kPopulation ? "population" : "sample");
            }},
      Field{"rl.reference",
            [](RunConfig& c, const std::string& v) { c.reference = parse_reference_mode(v); },
            [](const RunConfig& c) { return to_string(c.reference); }},
      DF_REAL("stage.eps_acc", stage.eps_acc),
      DF_INT("stage.required_rounds", stage.required_rounds),
      DF_OPT_INT("stage.fixed_m", stage.fixed_m),
      DF_REAL("upload.ratio", upload.ratio),
      DF_OPT_INT("upload.per_class_cap", upload.per_class_cap),
      DF_OPT_REAL("upload.noise_sigma", upload.noise_sigma),
      DF_OPT_INT("upload.groups", upload.groups),
      Field{"output.dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; },
            [](const RunConfig& c) { return c.output_dir; }},
  };
  return table;
}

#undef DF_INT
#undef DF_REAL
#undef DF_OPT_INT
#undef DF_OPT_REAL

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string k = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!seen.insert(k).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + k + "'");
    try {
      apply_setting(cfg, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  return parse_config(in);
}

void write_config(std::ostream& out, const RunConfig& cfg) {
  for (const Field& f : fields()) out << f.key << " = " << f.get(cfg) << '\n';
}

std::string config_to_string(const RunConfig& cfg) {
  std::ostringstream out;
  write_config(out, cfg);
  return out.str();
}

}  // namespace dualfed
