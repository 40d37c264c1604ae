// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// mmfed: experiment runner.
//
//   mmfed run       [--config PATH] [--seed U64] [--jobs N] [--out DIR]
//   mmfed evaluate  (--run DIR | [--config PATH] --model PATH | [--config PATH] --oracle)
//                   [--split train|val|test] [--seed U64] [--out DIR]
//   mmfed partition [--config PATH] [--seed U64] [--out DIR]
//   mmfed stats     [--config PATH] [--seed U64] [--out DIR] [--runs N]
//   mmfed generate  [--config PATH] [--seed U64] --out DIR
//
// Exit codes: 0 ok, 1 runtime failure, 2 invalid input.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mmfed/experiment.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mmfed;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = false) {
  cmd->add_option("--config", c.config, "Experiment config file (defaults apply when omitted)");
  cmd->add_option("--seed", c.seed, "Master seed; overrides the config");
  auto* out = cmd->add_option("--out", c.out, "Output directory; overrides the config");
  if (out_required) out->required();
}

exp::ExperimentConfig resolve(const Common& c) {
  exp::ExperimentConfig cfg = c.config.empty() ? exp::ExperimentConfig{} : exp::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

ParamVector read_model(const std::string& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("model file '" + path + "' does not exist");
  return io::load_model(path);
}

int cmd_run(const Common& c, std::size_t jobs) {
  const exp::ExperimentConfig cfg = resolve(c);
  exp::RunOptions opt;
  opt.jobs = jobs;
  opt.out_dir = cfg.out_dir;
  opt.progress = &std::cerr;
  const auto res = exp::run_experiment(cfg, opt);
  std::cout << "wrote " << res.rounds.size() << " rounds to " << cfg.out_dir << "\n";
  if (!res.validation.empty()) {
    std::cout << "final val WT dice "
              << res.validation.back().at(data::Region::kWT, metrics::Metric::kDice).mean << "\n";
  }
  return 0;
}

int cmd_evaluate(Common c, const std::string& run_dir, std::string model_path, const std::string& split,
                 bool oracle) {
  if (!run_dir.empty()) {
    if (!c.config.empty()) throw ConfigError("--run and --config are mutually exclusive");
    c.config = (fs::path(run_dir) / exp::kManifestFile).string();
    if (model_path.empty()) model_path = (fs::path(run_dir) / exp::kModelFile).string();
    if (c.out.empty()) c.out = run_dir;
  }
  if (model_path.empty() && !oracle) throw ConfigError("evaluate needs --run, --model or --oracle");
  const exp::ExperimentConfig cfg = resolve(c);
  const model::MUnet net(cfg.resolved_model());
  ParamVector params;
  if (!oracle) {
    params = read_model(model_path);
    net.check_params(params);
  }
  const exp::Dataset ds = exp::load_dataset(cfg);
  const auto report = exp::evaluate_indices(net, params, ds.samples, ds.part(split), cfg.threshold, oracle);
  fs::create_directories(cfg.out_dir);
  const std::string stem = "report_" + split + (oracle ? "_oracle" : "");
  exp::write_text(fs::path(cfg.out_dir) / (stem + ".csv"), metrics::report_csv(report));
  exp::write_text(fs::path(cfg.out_dir) / (stem + ".json"), metrics::report_json(report).dump(2) + "\n");
  std::cout << metrics::report_csv(report);
  return 0;
}

int cmd_partition(const Common& c) {
  const exp::ExperimentConfig cfg = resolve(c);
  const exp::Dataset ds = exp::load_dataset(cfg);
  const auto plan = exp::partition_training(cfg, ds);
  fs::create_directories(cfg.out_dir);
  exp::write_text(fs::path(cfg.out_dir) / exp::kPartitionFile, exp::partition_json(plan, ds).dump(2) + "\n");
  const std::string hist = exp::partition_histogram_csv(plan);
  exp::write_text(fs::path(cfg.out_dir) / exp::kHistogramFile, hist);
  std::cout << hist;
  return 0;
}

int cmd_stats(const Common& c, std::size_t runs) {
  const exp::ExperimentConfig cfg = resolve(c);
  const model::MUnet net(cfg.resolved_model());
  const auto st = net.stats(net.init(derive_seed(cfg.seed, "init")), runs);
  fs::create_directories(cfg.out_dir);
  const std::string table = exp::stats_csv(st);
  exp::write_text(fs::path(cfg.out_dir) / "stats.csv", table);
  std::cout << table;
  return 0;
}

int cmd_generate(const Common& c) {
  exp::ExperimentConfig cfg = resolve(c);
  cfg.data.source = exp::DataSource::kSynthetic;
  cfg.data.modalities = {0, 1, 2, 3};
  data::write_sample_dir(cfg.out_dir, exp::load_samples(cfg));
  std::cout << "wrote " << cfg.data.count << " samples to " << cfg.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated multi-modal segmentation simulator"};
  app.require_subcommand(1);

  Common run_c, eval_c, part_c, stats_c, gen_c;
  std::size_t jobs = 1, runs = 20;
  std::string run_dir, model_path, split = "test";
  bool oracle = false;

  auto* run = app.add_subcommand("run", "Federated training with per-round validation");
  add_common(run, run_c);
  run->add_option("--jobs", jobs, "Parallel client workers")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("evaluate", "Metric report for a trained model on one split");
  add_common(eval, eval_c);
  eval->add_option("--run", run_dir, "Output directory of a previous run (uses its manifest and model)");
  eval->add_option("--model", model_path, "Model file");
  eval->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_flag("--oracle", oracle, "Score the ground truth against itself");

  auto* part = app.add_subcommand("partition", "Write the client partition and its histogram");
  add_common(part, part_c);

  auto* stats = app.add_subcommand("stats", "Parameter count, FLOPs and inference time");
  add_common(stats, stats_c);
  stats->add_option("--runs", runs, "Timed inference passes")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("generate", "Write the synthetic dataset as sample files");
  add_common(gen, gen_c, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(run_c, jobs);
    if (*eval) return cmd_evaluate(eval_c, run_dir, model_path, split, oracle);
    if (*part) return cmd_partition(part_c);
    if (*stats) return cmd_stats(stats_c, runs);
    if (*gen) return cmd_generate(gen_c);
  } catch (const exp::RunFailure& e) {
    std::cerr << "error: run failed at " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
