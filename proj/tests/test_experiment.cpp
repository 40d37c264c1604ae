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

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "mmfed/experiment.hpp"

namespace mmfed::exp {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mmfed_test_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 16x16 two-stage model on 30 synthetic samples; a round takes milliseconds.
ExperimentConfig small_config() {
  ExperimentConfig c;
  c.data.count = 30;
  c.data.size = 16;
  c.model.stem_levels = 1;
  c.model.stages = 2;
  c.model.base_channels = 2;
  c.server.rounds = 3;
  c.server.q = 1.0;
  c.server.sigma = 0.0;
  c.seed = 9;
  return c;
}

TEST(ConfigTest, DefaultsMatchDocumentedValues) {
  const ExperimentConfig c;
  EXPECT_EQ(c.data.count, 200u);
  EXPECT_EQ(c.data.size, 64u);
  EXPECT_EQ(c.data.clients, 4u);
  EXPECT_EQ(c.data.alpha, 2.0);
  EXPECT_EQ(c.data.train_ratio, 0.7);
  EXPECT_EQ(c.server.momentum, 0.95);
  EXPECT_EQ(c.server.eta, 1e-2);
  EXPECT_EQ(c.server.rounds, 30u);
  EXPECT_EQ(c.server.local_epochs, 3u);
  EXPECT_EQ(c.server.q, 0.5);
  EXPECT_EQ(c.server.sigma, 1e-5);
  EXPECT_EQ(c.noise_profile(), "low");
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigTest, ParsesSectionsAndOverrides) {
  const auto c = parse_config(
      "; comment\n[experiment]\nseed = 77\n[data]\nclients = 6\nalpha = 0.5\nmodalities = flair, t2\n"
      "[server]\neta = 0.05\nq = 1\nnoise_profile = high\n");
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(c.data.clients, 6u);
  EXPECT_EQ(c.data.alpha, 0.5);
  EXPECT_EQ(c.data.modalities, (std::vector<std::size_t>{data::kT2, data::kFlair}));
  EXPECT_EQ(c.server.eta, 0.05);
  EXPECT_EQ(c.server.q, 1.0);
  EXPECT_EQ(c.server.sigma, 1e-2);
}

TEST(ConfigTest, UnknownKeysAndSectionsRejected) {
  EXPECT_THROW(parse_config("[server]\netaa = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[sever]\neta = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("eta = 1\n"), ConfigError);
  try {
    parse_config("[data]\nclient = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.client"), std::string::npos);
  }
}

TEST(ConfigTest, MalformedValuesRejected) {
  EXPECT_THROW(parse_config("[server]\nq = half\n"), ConfigError);
  EXPECT_THROW(parse_config("[server]\nrounds = 3.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[server]\nrounds = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nsource = dicom\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nmodalities = t1, pd\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nmodalities = t1, t1\n"), ConfigError);
  EXPECT_THROW(parse_config("[server]\nnoise_profile = medium\n"), ConfigError);
  EXPECT_THROW(parse_config("[server]\nsigma = 0.5\nnoise_profile = none\n"), ConfigError);
}

TEST(ConfigTest, ValidationNamesFirstViolation) {
  auto expect_reject = [](ExperimentConfig c, const std::string& needle) {
    try {
      c.validate();
      FAIL() << needle;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  ExperimentConfig c;
  c.server.q = 0.0;
  expect_reject(c, "q");
  c = ExperimentConfig{};
  c.data.train_ratio = 0.8;
  expect_reject(c, "ratio");
  c = ExperimentConfig{};
  c.data.size = 48;
  expect_reject(c, "input_size");
  c = ExperimentConfig{};
  c.data.source = DataSource::kSampleDir;
  expect_reject(c, "data.path");
  c = ExperimentConfig{};
  c.data.modalities.clear();
  expect_reject(c, "modalities");
  c = ExperimentConfig{};
  c.threshold = 1.0;
  expect_reject(c, "threshold");
}

TEST(ConfigTest, ManifestRoundTripsEveryField) {
  ExperimentConfig c = small_config();
  c.server.eta = 0.1 + 0.2;  // not exactly representable in short decimal
  c.server.sigma = 3.3e-7;
  c.data.modalities = {data::kT1c, data::kFlair};
  c.out_dir = "runs/x";
  const std::string text = to_ini(c);
  const ExperimentConfig back = parse_config(text);
  EXPECT_EQ(to_ini(back), text);
  EXPECT_EQ(back.server.eta, c.server.eta);
  EXPECT_EQ(back.server.sigma, c.server.sigma);
  EXPECT_EQ(back.data.modalities, c.data.modalities);
  EXPECT_EQ(back.resolved_model(), c.resolved_model());
  EXPECT_NE(text.find("noise_profile = custom"), std::string::npos);
}

TEST(ModelFileTest, RoundTripIsBitExact) {
  const model::MUnet net(small_config().resolved_model());
  ParamVector p = net.init(4);
  p[0] = -0.0;
  p[1] = std::numeric_limits<double>::denorm_min();
  const ParamVector back = io::decode_model(io::encode_model(p));
  EXPECT_TRUE(back.index() == p.index());
  ASSERT_EQ(back.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(p[i]));
  }
}

TEST(ModelFileTest, LayoutMatchesFormat) {
  auto idx = std::make_shared<ShapeIndex>();
  idx->add("ab", Shape{2, 1});
  const ParamVector p(idx, std::vector<double>{1.5, -2.0});
  const io::Bytes b = io::encode_model(p);
  // magic, count, name length, name, rank, 2 dims, 2 values
  ASSERT_EQ(b.size(), 4u + 8 + 8 + 2 + 8 + 16 + 16);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "FMU1");
  io::Reader r(b);
  r.take(4, "magic");
  EXPECT_EQ(r.u64("count"), 1u);
  EXPECT_EQ(r.u64("len"), 2u);
  EXPECT_EQ(r.str(2, "name"), "ab");
  EXPECT_EQ(r.u64("rank"), 2u);
  EXPECT_EQ(r.u64("d0"), 2u);
  EXPECT_EQ(r.u64("d1"), 1u);
  EXPECT_EQ(r.f64("v0"), 1.5);
  EXPECT_EQ(r.f64("v1"), -2.0);
}

TEST(ModelFileTest, CorruptFilesRejected) {
  const ParamVector p = ParamVector::from_values({1, 2, 3});
  const io::Bytes good = io::encode_model(p);
  io::Bytes bad_magic = good;
  bad_magic[3] = '2';
  EXPECT_THROW(io::decode_model(bad_magic), FormatError);
  for (std::size_t cut = 0; cut < good.size(); ++cut) {
    EXPECT_THROW(io::decode_model(io::Bytes(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut))),
                 FormatError)
        << cut;
  }
  io::Bytes extra = good;
  extra.push_back(0);
  EXPECT_THROW(io::decode_model(extra), FormatError);
}

TEST(ModelFileTest, ArchitectureMismatchNamesShape) {
  ExperimentConfig a = small_config(), b = small_config();
  b.model.base_channels = 4;
  const model::MUnet na(a.resolved_model()), nb(b.resolved_model());
  const ParamVector p = io::decode_model(io::encode_model(nb.init(1)));
  try {
    na.check_params(p);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("expected enc."), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("["), std::string::npos) << e.what();
  }
}

TEST(DatasetTest, SplitAndPartitionCoverTrainingSet) {
  const ExperimentConfig c = small_config();
  const Dataset ds = load_dataset(c);
  EXPECT_EQ(ds.samples.size(), 30u);
  EXPECT_EQ(ds.split.train.size(), 21u);
  EXPECT_EQ(ds.split.val.size(), 6u);
  EXPECT_EQ(ds.split.test.size(), 3u);
  const auto plan = partition_training(c, ds);
  plan.validate(ds.split.train.size());
  const auto shards = client_shards(plan, ds);
  std::vector<std::size_t> joined;
  for (const auto& s : shards) joined.insert(joined.end(), s.begin(), s.end());
  std::sort(joined.begin(), joined.end());
  EXPECT_EQ(joined, ds.split.train);
}

TEST(DatasetTest, HistogramCountsSumToTrainingSplit) {
  ExperimentConfig c = small_config();
  for (std::size_t n : {1u, 3u, 7u}) {
    c.data.clients = n;
    const Dataset ds = load_dataset(c);
    const std::string csv = partition_histogram_csv(partition_training(c, ds));
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "client,count,weight");
    std::size_t total = 0, rows = 0;
    while (std::getline(in, line)) {
      const auto a = line.find(','), b = line.find(',', a + 1);
      total += std::stoul(line.substr(a + 1, b - a - 1));
      ++rows;
    }
    EXPECT_EQ(rows, n);
    EXPECT_EQ(total, ds.split.train.size());
  }
}

TEST(DatasetTest, SingleClientOwnsWholeTrainingSplit) {
  ExperimentConfig c = small_config();
  c.data.clients = 1;
  const Dataset ds = load_dataset(c);
  const auto plan = partition_training(c, ds);
  ASSERT_EQ(plan.weights.size(), 1u);
  EXPECT_EQ(plan.weights[0], 1.0);
  EXPECT_EQ(client_shards(plan, ds)[0], ds.split.train);
}

TEST(DatasetTest, ModalityAblationZeroesDroppedInputs) {
  ExperimentConfig c = small_config();
  c.data.modalities = {data::kFlair};
  const auto full = load_samples(small_config());
  const auto abl = load_samples(c);
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_EQ(abl[i].images[data::kFlair], full[i].images[data::kFlair]);
    EXPECT_EQ(abl[i].labels, full[i].labels);
    for (std::size_t m : {data::kT1, data::kT1c, data::kT2}) {
      EXPECT_TRUE(std::all_of(abl[i].images[m].begin(), abl[i].images[m].end(), [](double v) { return v == 0.0; }));
    }
  }
}

TEST(DatasetTest, SampleDirectorySourceMatchesSynthetic) {
  const fs::path dir = scratch("fms");
  ExperimentConfig c = small_config();
  data::write_sample_dir(dir.string(), load_samples(c));
  ExperimentConfig d = c;
  d.data.source = DataSource::kSampleDir;
  d.data.path = dir.string();
  EXPECT_EQ(load_samples(d), load_samples(c));
  d.data.size = 32;
  d.model.stem_levels = 2;
  EXPECT_THROW(load_samples(d), ConfigError);
}

TEST(EvaluateTest, OracleGivesPerfectScores) {
  for (std::size_t classes : {2u, 4u}) {
    ExperimentConfig c = small_config();
    c.model.classes = classes;
    const Dataset ds = load_dataset(c);
    const model::MUnet net(c.resolved_model());
    const auto rep = evaluate_indices(net, ParamVector{}, ds.samples, ds.split.val, 0.5, true);
    for (data::Region r : data::kRegions) {
      if (classes == 2 && r != data::Region::kWT) continue;
      for (auto m : {metrics::kDice, metrics::kJaccard, metrics::kSensitivity, metrics::kPrecision,
                     metrics::kSpecificity}) {
        EXPECT_EQ(rep.at(r, m).mean, 1.0) << data::region_name(r) << " " << metrics::kMetricNames[m];
      }
      EXPECT_EQ(rep.at(r, metrics::kHausdorff).mean, 0.0);
    }
  }
}

RunOptions opts(const std::string& out, std::size_t jobs = 1) {
  RunOptions o;
  o.jobs = jobs;
  o.out_dir = out;
  return o;
}

TEST(RunTest, WritesEveryArtifact) {
  const fs::path out = scratch("run");
  const ExperimentConfig c = small_config();
  const auto res = run_experiment(c, opts(out.string()));
  for (const char* f : {kManifestFile, kModelFile, kRoundsFile, kValidationFile, kPartitionFile, kHistogramFile}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const std::string rounds = slurp(out / kRoundsFile);
  EXPECT_EQ(std::count(rounds.begin(), rounds.end(), '\n'), 3);
  const std::string val = slurp(out / kValidationFile);
  EXPECT_EQ(std::count(val.begin(), val.end(), '\n'), 4);  // rounds 0..3
  const auto first = nlohmann::json::parse(rounds.substr(0, rounds.find('\n')));
  for (const char* k : {"round", "sampled", "clients", "aggregate_norm", "aggregate_norm_clipped", "noise_seed",
                        "duration_s", "noop"}) {
    EXPECT_TRUE(first.contains(k)) << k;
  }
  EXPECT_EQ(io::load_model((out / kModelFile).string()), res.final_model);
  const ExperimentConfig manifest = load_config((out / kManifestFile).string());
  EXPECT_EQ(manifest.seed, c.seed);
  EXPECT_EQ(manifest.resolved_server().sigma, 0.0);
  EXPECT_EQ(res.rounds.size(), 3u);
  EXPECT_EQ(res.validation.size(), 4u);
}

TEST(RunTest, ZeroNoiseRunsAreByteIdentical) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  const ExperimentConfig c = small_config();
  run_experiment(c, opts(a.string()));
  run_experiment(c, opts(b.string(), 2));
  EXPECT_EQ(slurp(a / kModelFile), slurp(b / kModelFile));
  EXPECT_EQ(slurp(a / kValidationFile), slurp(b / kValidationFile));
  EXPECT_EQ(slurp(a / kPartitionFile), slurp(b / kPartitionFile));
}

TEST(RunTest, ManifestReproducesRun) {
  const fs::path a = scratch("manifest_a"), b = scratch("manifest_b");
  ExperimentConfig c = small_config();
  c.server.sigma = 1e-3;
  const auto r1 = run_experiment(c, opts(a.string()));
  const auto r2 = run_experiment(load_config((a / kManifestFile).string()), opts(b.string()));
  EXPECT_EQ(r1.final_model, r2.final_model);
}

TEST(RunTest, SeedChangesStreamsIndependently) {
  ExperimentConfig c = small_config();
  c.server.rounds = 1;
  const auto r1 = run_experiment(c);
  c.seed += 1;
  const auto r2 = run_experiment(c);
  EXPECT_FALSE(r1.initial == r2.initial);
  EXPECT_NE(r1.dataset.split.train, r2.dataset.split.train);
}

TEST(RunTest, DivergingClientsFailWithoutCorruptingTheModel) {
  ExperimentConfig c = small_config();
  c.server.eta = 1e308;
  c.server.local_epochs = 1;
  c.server.batch_size = 64;
  c.server.momentum = 0.0;
  const auto res = run_experiment(c, opts(""));
  EXPECT_TRUE(res.final_model.all_finite());
  for (const auto& log : res.rounds) {
    for (const auto& cl : log.clients) {
      if (cl.failed) {
        EXPECT_NE(cl.diagnostic.find("non-finite"), std::string::npos);
      }
      EXPECT_LE(cl.post_clip_norm, c.server.S * (1 + 1e-12));
    }
  }
}

TEST(RunTest, RoundExceptionIsRuntimeFailure) {
  const fs::path out = scratch("round_error");
  RunOptions opt = opts(out.string());
  opt.drop_hook = [](std::size_t round, std::size_t) -> bool {
    if (round == 2) throw std::runtime_error("transport down");
    return false;
  };
  try {
    run_experiment(small_config(), opt);
    FAIL() << "expected RunFailure";
  } catch (const RunFailure& e) {
    EXPECT_EQ(e.round(), 2u);
  }
  const std::string rounds = slurp(out / kRoundsFile);
  EXPECT_NE(rounds.find("{\"round\":2,\"error\":\"transport down\"}"), std::string::npos);
  EXPECT_FALSE(fs::exists(out / kModelFile));
}

// --- command line -----------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + MMFED_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& extra = "") {
  const fs::path p = dir / "config.ini";
  std::ofstream(p) << to_ini(small_config()) << extra;
  return p;
}

TEST(CliTest, RunEvaluatePartitionStats) {
  const fs::path dir = scratch("cli");
  const fs::path cfg = write_config(dir);
  const fs::path run = dir / "run";
  ASSERT_EQ(run_cli("run --config " + cfg.string() + " --out " + run.string()), 0);
  const std::string rounds = slurp(run / kRoundsFile);
  EXPECT_EQ(std::count(rounds.begin(), rounds.end(), '\n'), 3);

  ASSERT_EQ(run_cli("evaluate --run " + run.string() + " --split test"), 0);
  const std::string csv = slurp(run / "report_test.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 19);  // header + 3 regions x 6 metrics
  EXPECT_TRUE(fs::exists(run / "report_test.json"));
  ASSERT_EQ(run_cli("evaluate --run " + run.string() + " --split test --out " + (dir / "again").string()), 0);
  EXPECT_EQ(slurp(dir / "again" / "report_test.csv"), csv);

  ASSERT_EQ(run_cli("partition --config " + cfg.string() + " --out " + (dir / "part").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "part" / kPartitionFile));
  ASSERT_EQ(run_cli("stats --config " + cfg.string() + " --runs 2 --out " + (dir / "stats").string()), 0);
  const std::string stats = slurp(dir / "stats" / "stats.csv");
  const model::MUnet net(small_config().resolved_model());
  EXPECT_NE(stats.find("M-Unet," + std::to_string(net.init(0).size()) + ","), std::string::npos) << stats;
}

TEST(CliTest, SeedFlagOverridesConfig) {
  const fs::path dir = scratch("cli_seed");
  const fs::path cfg = write_config(dir);
  ASSERT_EQ(run_cli("partition --config " + cfg.string() + " --seed 123 --out " + (dir / "a").string()), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "a" / kPartitionFile));
  EXPECT_EQ(j["seed"].get<std::uint64_t>(), 123u);
}

TEST(CliTest, InvalidInputExitsTwo) {
  const fs::path dir = scratch("cli_bad");
  EXPECT_EQ(run_cli("run --config " + write_config(dir, "").string() + "x"), 2);
  const fs::path q0 = dir / "q0.ini";
  std::ofstream(q0) << "[server]\nq = 0\n";
  EXPECT_EQ(run_cli("run --config " + q0.string() + " --out " + (dir / "o").string()), 2);
  EXPECT_FALSE(fs::exists(dir / "o" / kRoundsFile));
  const fs::path typo = dir / "typo.ini";
  std::ofstream(typo) << "[server]\nrouns = 3\n";
  EXPECT_EQ(run_cli("partition --config " + typo.string()), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("evaluate --config " + write_config(dir).string()), 2);
}

TEST(CliTest, ArchitectureMismatchExitsTwo) {
  const fs::path dir = scratch("cli_mismatch");
  const model::MUnet other([] {
    ExperimentConfig c = small_config();
    c.model.base_channels = 4;
    return c.resolved_model();
  }());
  io::save_model((dir / "other.fmu").string(), other.init(1));
  EXPECT_EQ(run_cli("evaluate --config " + write_config(dir).string() + " --model " + (dir / "other.fmu").string()),
            2);
  io::write_file((dir / "junk.fmu").string(), io::Bytes{'F', 'M', 'U', '2'});
  EXPECT_EQ(run_cli("evaluate --config " + write_config(dir).string() + " --model " + (dir / "junk.fmu").string()),
            2);
}

TEST(CliTest, RuntimeFailureExitsOne) {
  const fs::path dir = scratch("cli_fail");
  const fs::path cfg = write_config(dir);
  fs::create_directories(dir / "o" / kModelFile);  // final save cannot open the file
  EXPECT_EQ(run_cli("run --config " + cfg.string() + " --out " + (dir / "o").string()), 1);
}

TEST(CliTest, OracleEvaluationIsPerfect) {
  const fs::path dir = scratch("cli_oracle");
  ASSERT_EQ(run_cli("evaluate --oracle --config " + write_config(dir).string() + " --out " + dir.string()), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "report_test_oracle.json"));
  EXPECT_EQ(j["regions"]["WT"]["dice"]["mean"].get<double>(), 1.0);
  EXPECT_EQ(j["regions"]["WT"]["hausdorff"]["mean"].get<double>(), 0.0);
}

}  // namespace
}  // namespace mmfed::exp
