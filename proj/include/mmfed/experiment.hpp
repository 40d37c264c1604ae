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

// Experiment pipeline: dataset provisioning, partitioning, federated
// training with per-round validation, evaluation and complexity reports.
//
// Random streams derived from the master seed: "data" (synthetic samples),
// "split", "partition", "init", and the protocol's own "sampling", "client"
// and "noise" streams.
//
// Files written by run_experiment into the output directory:
//   manifest.ini              resolved config, every default expanded
//   partition.json            client weights and dataset indices
//   partition_histogram.csv   client,count,weight
//   rounds.jsonl              one record per round
//   validation.jsonl          validation report after round 0..T
//   model.fmu                 final global model

#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfed/config.hpp"
#include "mmfed/dataset_io.hpp"
#include "mmfed/fed.hpp"
#include "mmfed/metrics.hpp"
#include "mmfed/model_file.hpp"
#include "mmfed/munet.hpp"
#include "mmfed/partition.hpp"
#include "mmfed/synthetic.hpp"

namespace mmfed::exp {

inline constexpr char kManifestFile[] = "manifest.ini";
inline constexpr char kModelFile[] = "model.fmu";
inline constexpr char kRoundsFile[] = "rounds.jsonl";
inline constexpr char kValidationFile[] = "validation.jsonl";
inline constexpr char kPartitionFile[] = "partition.json";
inline constexpr char kHistogramFile[] = "partition_histogram.csv";

/// A training round that could not complete.
class RunFailure : public std::runtime_error {
 public:
  RunFailure(std::size_t round, const std::string& what)
      : std::runtime_error("round " + std::to_string(round) + ": " + what), round_(round) {}
  std::size_t round() const { return round_; }

 private:
  std::size_t round_;
};

struct Dataset {
  std::vector<data::MultiModalSample> samples;
  data::Split split;

  const std::vector<std::size_t>& part(const std::string& name) const {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    if (name == "test") return split.test;
    throw ConfigError("unknown split '" + name + "' (use train, val or test)");
  }
};

inline std::vector<data::MultiModalSample> load_samples(const ExperimentConfig& cfg) {
  std::vector<data::MultiModalSample> samples;
  switch (cfg.data.source) {
    case DataSource::kSynthetic:
      samples = data::generate_synthetic_dataset(cfg.data.count, {cfg.data.size, cfg.data.noise_std}, cfg.seed);
      break;
    case DataSource::kSampleDir:
      samples = data::read_sample_dir(cfg.data.path);
      break;
    case DataSource::kNifti:
      samples = data::load_nifti_cases(cfg.data.path, cfg.data.size);
      break;
  }
  if (samples.empty()) throw ConfigError("data source '" + cfg.data.path + "' holds no samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.images.size() != data::kNumModalities || s.height != cfg.data.size || s.width != cfg.data.size) {
      throw ConfigError("sample " + std::to_string(i) + " is " + std::to_string(s.height) + "x" +
                        std::to_string(s.width) + " with " + std::to_string(s.images.size()) +
                        " modalities; config expects " + std::to_string(cfg.data.size) + "x" +
                        std::to_string(cfg.data.size) + " with 4");
    }
  }
  if (cfg.data.modalities.size() != data::kNumModalities) {
    for (auto& s : samples) s = data::ablate_modalities(s, cfg.data.modalities);
  }
  return samples;
}

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  Dataset ds;
  ds.samples = load_samples(cfg);
  Rng rng = make_rng(cfg.seed, "split");
  ds.split = data::split_dataset(ds.samples.size(), cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio,
                                 rng);
  if (ds.split.train.size() < cfg.data.clients) {
    throw ConfigError("training split has " + std::to_string(ds.split.train.size()) + " samples, fewer than " +
                      std::to_string(cfg.data.clients) + " clients");
  }
  return ds;
}

/// Dirichlet partition of the training split; assignments are positions in
/// `ds.split.train`.
inline data::PartitionPlan partition_training(const ExperimentConfig& cfg, const Dataset& ds) {
  return data::dirichlet_partition(ds.split.train.size(), cfg.data.clients, cfg.data.alpha, cfg.seed);
}

/// Per-client dataset indices.
inline std::vector<std::vector<std::size_t>> client_shards(const data::PartitionPlan& plan, const Dataset& ds) {
  std::vector<std::vector<std::size_t>> shards;
  for (const auto& a : plan.assignments) {
    std::vector<std::size_t> s;
    for (std::size_t pos : a) s.push_back(ds.split.train[pos]);
    std::sort(s.begin(), s.end());
    shards.push_back(std::move(s));
  }
  return shards;
}

inline nlohmann::ordered_json partition_json(const data::PartitionPlan& plan, const Dataset& ds) {
  nlohmann::ordered_json j;
  j["clients"] = plan.weights.size();
  j["alpha"] = plan.alpha;
  j["seed"] = plan.seed;
  j["training_samples"] = ds.split.train.size();
  j["weights"] = plan.weights;
  j["assignments"] = client_shards(plan, ds);
  return j;
}

inline std::string partition_histogram_csv(const data::PartitionPlan& plan) {
  std::ostringstream os;
  os << "client,count,weight\n";
  for (std::size_t k = 0; k < plan.assignments.size(); ++k) {
    os << k << ',' << plan.assignments[k].size() << ',' << detail::format_double(plan.weights[k]) << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json round_log_json(const fed::RoundLog& log) {
  nlohmann::ordered_json j;
  j["round"] = log.round;
  j["sampled"] = log.sampled;
  j["noop"] = log.noop;
  nlohmann::ordered_json clients = nlohmann::ordered_json::array();
  for (const auto& c : log.clients) {
    nlohmann::ordered_json cj;
    cj["client_id"] = c.client_id;
    cj["n_k"] = c.n_k;
    cj["weight"] = c.weight;
    cj["pre_clip_norm"] = c.pre_clip_norm;
    cj["post_clip_norm"] = c.post_clip_norm;
    cj["mean_loss"] = c.mean_loss;
    cj["clipped_steps"] = c.clipped_steps;
    cj["failed"] = c.failed;
    if (c.failed) cj["diagnostic"] = c.diagnostic;
    clients.push_back(std::move(cj));
  }
  j["clients"] = std::move(clients);
  j["aggregate_norm"] = log.aggregate_norm;
  j["aggregate_norm_clipped"] = log.aggregate_norm_clipped;
  j["noise_seed"] = log.noise_seed;
  j["duration_s"] = log.duration_s;
  return j;
}

/// Probabilities that reproduce the ground truth exactly.
inline Tensor oracle_probs(const data::MultiModalSample& s, std::size_t classes) {
  const std::size_t n = s.pixels();
  Tensor p({classes, s.height, s.width}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (classes == 2) {
      const bool fg = s.labels[i] != data::kBackground;
      p[(fg ? 1 : 0) * n + i] = 1.0;
    } else {
      p[data::label_to_class(s.labels[i]) * n + i] = 1.0;
    }
  }
  return p;
}

inline metrics::MetricReport evaluate_indices(const model::MUnet& net, const ParamVector& params,
                                              const std::vector<data::MultiModalSample>& samples,
                                              const std::vector<std::size_t>& indices, double threshold,
                                              bool oracle = false) {
  if (indices.empty()) throw ConfigError("evaluation split is empty");
  std::vector<metrics::SampleMetrics> per;
  per.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto& s = samples.at(i);
    const Tensor probs = oracle ? oracle_probs(s, net.config().classes) : net.predict(params, s);
    per.push_back(metrics::evaluate(probs, s.labels, threshold));
  }
  return metrics::summarize(per);
}

/// One-row complexity table.
inline std::string stats_csv(const model::ModelStats& st) {
  std::ostringstream os;
  os << "model,params,flops,bias_adds,inference_ms\n";
  char ms[32];
  std::snprintf(ms, sizeof(ms), "%.3f", st.mean_inference_seconds * 1e3);
  os << "M-Unet," << st.param_count << ',' << st.flop_count << ',' << st.bias_adds << ',' << ms << '\n';
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

struct RunOptions {
  std::size_t jobs = 1;
  std::string out_dir;            // empty: keep results in memory only
  std::ostream* progress = nullptr;
  fed::InProcessChannel::DropHook drop_hook;  // transport fault injection
};

struct RunResult {
  Dataset dataset;
  data::PartitionPlan plan;
  ParamVector initial;
  ParamVector final_model;
  std::vector<fed::RoundLog> rounds;
  std::vector<metrics::MetricReport> validation;  // [0] is the untrained model
};

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const bool write = !opt.out_dir.empty();
  const fs::path out(opt.out_dir);
  std::ofstream rounds_out, val_out;
  if (write) {
    fs::create_directories(out);
    ExperimentConfig manifest = cfg;
    manifest.out_dir = opt.out_dir;
    write_text(out / kManifestFile, to_ini(manifest));
  }

  RunResult res;
  res.dataset = load_dataset(cfg);
  res.plan = partition_training(cfg, res.dataset);
  const auto shards = client_shards(res.plan, res.dataset);
  if (write) {
    write_text(out / kPartitionFile, partition_json(res.plan, res.dataset).dump(2) + "\n");
    write_text(out / kHistogramFile, partition_histogram_csv(res.plan));
    rounds_out.open(out / kRoundsFile, std::ios::binary | std::ios::trunc);
    val_out.open(out / kValidationFile, std::ios::binary | std::ios::trunc);
    if (!rounds_out || !val_out) throw std::runtime_error("cannot create log files in '" + opt.out_dir + "'");
  }

  const model::MUnet net(cfg.resolved_model());
  const model::SegmentationObjective objective(net, res.dataset.samples);
  fed::Federation<model::SegmentationObjective> fedn(cfg.resolved_server(), objective, shards);
  fedn.set_jobs(opt.jobs);
  if (opt.drop_hook) fedn.channel().set_drop_hook(opt.drop_hook);
  res.initial = net.init(derive_seed(cfg.seed, "init"));
  ParamVector global = res.initial;

  const auto& val = res.dataset.split.val;
  auto validate_round = [&](std::size_t t) {
    if (val.empty()) return;
    res.validation.push_back(evaluate_indices(net, global, res.dataset.samples, val, cfg.threshold));
    if (write) {
      nlohmann::ordered_json j;
      j["round"] = t;
      j["split"] = "val";
      j["report"] = metrics::report_json(res.validation.back());
      val_out << j.dump() << '\n' << std::flush;
    }
  };
  validate_round(0);

  for (std::size_t t = 1; t <= cfg.server.rounds; ++t) {
    try {
      res.rounds.push_back(fedn.run_round(global, t));
      if (!global.all_finite()) throw std::runtime_error("global model became non-finite");
    } catch (const std::exception& e) {
      if (write) {
        nlohmann::ordered_json j;
        j["round"] = t;
        j["error"] = e.what();
        rounds_out << j.dump() << '\n' << std::flush;
      }
      throw RunFailure(t, e.what());
    }
    if (write) rounds_out << round_log_json(res.rounds.back()).dump() << '\n' << std::flush;
    validate_round(t);
    if (opt.progress) {
      const auto& log = res.rounds.back();
      *opt.progress << "round " << t << "/" << cfg.server.rounds << ": " << log.sampled.size() << " sampled";
      if (log.noop) *opt.progress << " (no-op)";
      *opt.progress << ", aggregate norm " << std::setprecision(4) << log.aggregate_norm;
      if (!res.validation.empty()) {
        *opt.progress << ", val WT dice "
                      << res.validation.back().at(data::Region::kWT, metrics::Metric::kDice).mean;
      }
      *opt.progress << ", " << std::setprecision(3) << log.duration_s << " s\n" << std::flush;
    }
  }
  res.final_model = global;
  if (write) io::save_model((out / kModelFile).string(), global);
  return res;
}

}  // namespace mmfed::exp
