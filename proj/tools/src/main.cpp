// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// shadowtune command-line driver.

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "shadowtune/harness.hpp"

namespace {

using namespace shadowtune;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::optional<std::string> peft;
  std::optional<double> theta;
  std::optional<double> tau;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "Run configuration (JSON)");
  sub->add_option("--seed", o.seed, "Run seed");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_option("--mode", o.mode, "dense | shadowy | exposer-oracle | predicted | random");
  sub->add_option("--peft", o.peft, "lora | adapter | bitfit");
  sub->add_option("--theta", o.theta, "MLP block threshold for exposer-oracle mode");
  sub->add_option("--tau", o.tau, "Attention mass coverage");
}

RunConfig resolve(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? parse_run_config("{}") : load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.mode) cfg.mode = parse_sparsity_mode(*o.mode);
  if (o.peft) cfg.peft.method = parse_peft_method(*o.peft);
  if (o.theta) cfg.theta = *o.theta;
  if (o.tau) cfg.tau = *o.tau;
  cfg.validate();
  return cfg;
}

void print_param_counts(const RunConfig& cfg) {
  const auto w = init_backbone(cfg.dims, cfg.backbone, cfg.backbone_seed);
  Rng rng(cfg.seed);
  const auto peft = init_peft(w, cfg.peft, rng);
  std::printf("peft=%s trainable_params=%zu backbone_params=%zu\n", peft_method_name(cfg.peft.method),
              trainable_param_count(peft), backbone_param_count(cfg.dims));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-sparse PEFT fine-tuning experiments"};
  app.require_subcommand(1);
  Overrides o;
  using Op = std::vector<std::filesystem::path> (*)(const RunConfig&);
  const std::pair<const char*, Op> commands[] = {
      {"gen-corpus", run_gen_corpus},   {"collect-traces", run_collect_traces},
      {"train-predictors", run_train_predictors}, {"finetune", run_finetune},
      {"bench", run_bench_op},          {"report", run_report},
  };
  std::vector<std::pair<CLI::App*, Op>> subs;
  for (const auto& [name, op] : commands) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, o);
    subs.emplace_back(sub, op);
  }
  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve(o);
    for (const auto& [sub, op] : subs) {
      if (!sub->parsed()) continue;
      print_param_counts(cfg);
      for (const auto& path : op(cfg)) std::printf("wrote %s\n", path.string().c_str());
    }
  } catch (const Error& e) {
    std::cout << error_json(e.kind(), e.what()) << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cout << error_json("internal_error", e.what()) << std::endl;
    return 1;
  }
  return 0;
}
