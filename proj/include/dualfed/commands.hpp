// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dualfed/config.hpp"
#include "dualfed/federation.hpp"

namespace dualfed {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2, kExitThreshold = 3 };

// Environment variable that replaces `output.dir` when set and non-empty.
inline constexpr const char* kOutputDirEnv = "DUALFED_OUTPUT_DIR";
std::string resolve_output_dir(const RunConfig& cfg);

// Named variants: base, sft_rl, sft_only, rl_only, ref_mix, ref_latest,
// ref_final_sft, decoupled_on, decoupled_off, fedlora, grpo, dr_grpo, gmpo,
// dapo, liteppo. Anything of the form key=value[;key=value] applies raw settings.
RunConfig apply_variant(const RunConfig& base, const std::string& variant);

// metrics.csv rows for rounds 1..T.
void write_metrics_csv(std::ostream& out, const ExperimentResult& result, int num_domains);
// '#' result lines followed by the config listing; re-parses with parse_config.
void write_summary(std::ostream& out, const RunConfig& cfg, const ExperimentResult& result, double wall_seconds);

// Each prints one `error code=<kind>: <message>` line on failure.
int cmd_run(const std::string& config_path, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const std::vector<std::string>& which, std::uint64_t seed, std::ostream& out, std::ostream& err);
int cmd_partition(const std::string& config_path, std::ostream& out, std::ostream& err);
int cmd_compare(const std::string& config_path, const std::vector<std::string>& variants, std::ostream& out,
                std::ostream& err);

}  // namespace dualfed
