/*
 * Copyright 2026 The MetaDrug Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metadrug/config.hpp"
#include "metadrug/experiments.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

metadrug::RunConfig load_config(const std::string& path) {
  metadrug::RunConfig cfg = metadrug::parse_run_config(path);
  metadrug::apply_env_seed_override(cfg);
  std::cout << "# effective configuration\n" << metadrug::dump_config(cfg) << std::flush;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metadrug: uncertainty-aware two-level meta-learning for cold-start "
               "medication recommendation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, ckpt_path, out_file;
  std::string percentiles_arg;
  metadrug::EvalFlags flags;

  auto* generate = app.add_subcommand("generate", "Write a synthetic cohort + DDI sidecar");
  generate->add_option("--config", config_path, "run config file")->required();
  generate->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "Meta-train and fit the uncertainty filter");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir, "directory containing cohort.jsonl")->required();
  train->add_option("--out", out_dir)->required();

  auto* evaluate = app.add_subcommand("evaluate", "Meta-test a checkpoint on the test split");
  evaluate->add_option("--ckpt", ckpt_path)->required();
  evaluate->add_option("--data", data_dir)->required();
  evaluate->add_option("--out", out_dir)->required();
  evaluate->add_flag("--no-filter", flags.no_filter, "disable uncertainty filtering");
  evaluate->add_flag("--no-self", flags.no_self, "skip self-adaptation");
  evaluate->add_flag("--no-peer", flags.no_peer, "skip peer-adaptation");

  auto* coldstart = app.add_subcommand("coldstart", "Evaluate over cold-start percentiles");
  coldstart->add_option("--ckpt", ckpt_path)->required();
  coldstart->add_option("--data", data_dir)->required();
  coldstart->add_option("--percentiles", percentiles_arg, "comma-separated list, e.g. 10,20,30");
  coldstart->add_option("--out", out_dir)->required();

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the five ablation variants");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--data", data_dir)->required();
  ablate->add_option("--out", out_dir)->required();

  auto* exp = app.add_subcommand("export-embeddings", "Write per-patient embedding table");
  exp->add_option("--ckpt", ckpt_path)->required();
  exp->add_option("--data", data_dir)->required();
  exp->add_option("--out", out_file, "output TSV file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (generate->parsed()) {
      metadrug::cmd_generate(load_config(config_path), out_dir);
    } else if (train->parsed()) {
      metadrug::cmd_train(load_config(config_path), data_dir, out_dir);
    } else if (evaluate->parsed()) {
      const auto j = metadrug::cmd_evaluate(ckpt_path, data_dir, flags, out_dir);
      std::cout << j.dump(2) << "\n";
    } else if (coldstart->parsed()) {
      std::vector<double> percentiles;
      if (!percentiles_arg.empty())
        percentiles = metadrug::detail::to_double_list(percentiles_arg, "--percentiles");
      const auto j = metadrug::cmd_coldstart(ckpt_path, data_dir, percentiles, out_dir);
      std::cout << j.dump(2) << "\n";
    } else if (ablate->parsed()) {
      const auto j = metadrug::cmd_ablate(load_config(config_path), data_dir, out_dir);
      std::cout << j.dump(2) << "\n";
    } else if (exp->parsed()) {
      metadrug::cmd_export_embeddings(ckpt_path, data_dir, out_file);
    }
  } catch (const metadrug::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const metadrug::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
