// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dualfed/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Federated dual-encoder simulator"};
  app.require_subcommand(1);

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment and write metrics, summary and checkpoints");
  run->add_option("config", config, "Config file")->required();

  std::vector<std::string> which;
  std::uint64_t seed = 1;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad->add_option("--which", which, "Losses to check (default: all)")->delimiter(',');
  grad->add_option("--seed", seed, "Instance seed");

  auto* part = app.add_subcommand("partition", "Print per-client class counts as CSV");
  part->add_option("config", config, "Config file")->required();

  std::vector<std::string> variants;
  auto* cmp = app.add_subcommand("compare", "Run variants of a config and tabulate final metrics");
  cmp->add_option("config", config, "Config file")->required();
  cmp->add_option("--variants", variants, "Comma-separated variant names")->delimiter(',')->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dualfed::kExitValidation;
  }

  if (*run) return dualfed::cmd_run(config, std::cout, std::cerr);
  if (*grad) return dualfed::cmd_gradcheck(which, seed, std::cout, std::cerr);
  if (*part) return dualfed::cmd_partition(config, std::cout, std::cerr);
  if (*cmp) return dualfed::cmd_compare(config, variants, std::cout, std::cerr);
  return dualfed::kExitValidation;
}
