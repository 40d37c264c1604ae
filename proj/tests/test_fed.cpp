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

#include <cmath>
#include <numeric>
#include <random>

#include "mmfed/fed.hpp"
#include "mmfed/munet.hpp"
#include "support/objectives.hpp"

namespace mmfed::fed {
namespace {

using ::mmfed::testing::LeastSquares;

ParamVector vec(std::vector<double> v) { return ParamVector::from_values(std::move(v)); }

std::vector<std::size_t> iota_ids(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

TEST(FlatClipTest, HalvesWhenNormIsTwiceBound) {
  ParamVector d = vec({6, 8});
  ParamVector c = flat_clip(d, 5.0);
  EXPECT_DOUBLE_EQ(c[0], 3.0);
  EXPECT_DOUBLE_EQ(c[1], 4.0);
  EXPECT_NEAR(c.norm(), 5.0, 1e-12);
}

TEST(FlatClipTest, WithinBoundUnchanged) {
  ParamVector d = vec({1.8, 2.4});
  EXPECT_EQ(flat_clip(d, 5.0), d);
}

TEST(FlatClipTest, ThreeFourExample) {
  ParamVector c = flat_clip(vec({3, 4}), 2.5);
  EXPECT_DOUBLE_EQ(c[0], 1.5);
  EXPECT_DOUBLE_EQ(c[1], 2.0);
}

TEST(FlatClipTest, ZeroVectorUnchanged) { EXPECT_EQ(flat_clip(vec({0, 0, 0}), 1.0), vec({0, 0, 0})); }

TEST(FlatClipTest, HugeFiniteVectorClipsToBound) {
  const ParamVector d = vec({3e200, -4e200, 0});
  EXPECT_DOUBLE_EQ(d.norm(), 5e200);
  const ParamVector c = flat_clip(d, 2.0);
  EXPECT_NEAR(c.norm(), 2.0, 1e-15);
  EXPECT_NEAR(c[0], 1.2, 1e-15);
  EXPECT_NEAR(c[1], -1.6, 1e-15);
}

TEST(FlatClipTest, TinyVectorNormDoesNotUnderflow) {
  EXPECT_DOUBLE_EQ(vec({3e-200, 4e-200}).norm(), 5e-200);
  EXPECT_TRUE(std::isinf(vec({1.0, HUGE_VAL}).norm()));
  EXPECT_TRUE(std::isnan(vec({1.0, std::nan("")}).norm()));
}

TEST(ServerClipTest, Examples) {
  EXPECT_EQ(server_clip(vec({0.3, 0.4}), 1.0), vec({0.3, 0.4}));
  ParamVector c = server_clip(vec({6, 8}), 5.0);
  EXPECT_DOUBLE_EQ(c[0], 3.0);
  EXPECT_DOUBLE_EQ(c[1], 4.0);
  ParamVector d = server_clip(vec({0, 20}), 10.0);
  EXPECT_DOUBLE_EQ(d[1], 10.0);
}

TEST(ClipPropertyTest, BoundDirectionAndExactness) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> logscale(-6.0, 6.0);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t n = 1 + trial % 17;
    const double scale = std::pow(10.0, logscale(rng));
    std::vector<double> v(n);
    for (double& x : v) x = g(rng) * scale;
    ParamVector x = vec(v);
    const double bound = std::pow(10.0, logscale(rng));
    for (const ParamVector& y : {flat_clip(x, bound), server_clip(x, bound)}) {
      EXPECT_LE(y.norm(), bound + 1e-9);
      double ratio = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] == 0.0) continue;
        const double r = y[i] / x[i];
        if (ratio < 0) ratio = r;
        EXPECT_GE(r, 0.0);
        EXPECT_NEAR(r, ratio, 1e-12 * ratio);
      }
      if (x.norm() <= bound) {
        EXPECT_EQ(y, x);
      }
    }
  }
}

TEST(ClientWeightTest, Examples) {
  EXPECT_EQ(client_weight(50, 100), 0.5);
  EXPECT_EQ(client_weight(200, 100), 1.0);
  EXPECT_EQ(client_weight(100, 100), 1.0);
  EXPECT_THROW(client_weight(0, 100), std::invalid_argument);
}

TEST(SampleClientsTest, FullProbabilitySelectsAll) {
  Rng rng(1);
  EXPECT_EQ(sample_clients(iota_ids(7), 1.0, rng), iota_ids(7));
}

TEST(SampleClientsTest, TinyProbabilitySelectsNone) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(sample_clients(iota_ids(10), 1e-300, rng).empty());
}

TEST(SampleClientsTest, MeanCountIsBinomial) {
  Rng rng(2026);
  double total = 0.0;
  for (int round = 0; round < 10000; ++round) total += static_cast<double>(sample_clients(iota_ids(10), 0.5, rng).size());
  const double mean = total / 10000.0;
  EXPECT_GE(mean, 4.85);
  EXPECT_LE(mean, 5.15);
}

TEST(SampleClientsTest, DeterministicAndSubset) {
  Rng a(9), b(9);
  for (int i = 0; i < 50; ++i) {
    auto s = sample_clients(iota_ids(6, 10), 0.3, a);
    EXPECT_EQ(s, sample_clients(iota_ids(6, 10), 0.3, b));
    for (std::size_t id : s) EXPECT_TRUE(id >= 10 && id < 16);
  }
  EXPECT_THROW(sample_clients(iota_ids(3), 0.0, a), std::invalid_argument);
}

std::vector<ClientUpdate> scalar_updates(const std::vector<double>& d) {
  std::vector<ClientUpdate> u;
  for (std::size_t i = 0; i < d.size(); ++i) u.push_back({vec({d[i]}), 1, i});
  return u;
}

TEST(AggregateTest, Examples) {
  auto one = scalar_updates({2.5});
  EXPECT_EQ(aggregate(one, std::vector<double>{1.0}, 1.0, 1.0, vec({0}))[0], 2.5);

  std::vector<ClientUpdate> two{{vec({2, 0}), 1, 0}, {vec({0, 2}), 1, 1}};
  EXPECT_EQ(aggregate(two, std::vector<double>{1, 1}, 1.0, 2.0, vec({0, 0})), vec({1, 1}));

  auto three = scalar_updates({4, 2, 1});
  EXPECT_NEAR(aggregate(three, std::vector<double>{0.5, 1, 1}, 0.5, 2.5, vec({0}))[0], 4.0, 1e-15);
}

TEST(AggregateTest, EmptyIsZero) {
  std::vector<ClientUpdate> none;
  EXPECT_EQ(aggregate(none, std::vector<double>{}, 0.5, 1.0, vec({3, 4})), vec({0, 0}));
}

TEST(AggregateTest, ReorderInvariantBitExactAndLinear) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ClientUpdate> u;
    std::vector<double> w;
    for (std::size_t k = 0; k < 5; ++k) {
      std::vector<double> v(8);
      for (double& x : v) x = g(rng);
      u.push_back({vec(v), 1 + k, k});
      w.push_back(0.1 + 0.2 * static_cast<double>(k));
    }
    const ParamVector a = aggregate(u, w, 0.5, 3.0, u[0].delta);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<ClientUpdate> up;
    std::vector<double> wp;
    for (std::size_t i : perm) {
      up.push_back(u[i]);
      wp.push_back(w[i]);
    }
    EXPECT_EQ(aggregate(up, wp, 0.5, 3.0, u[0].delta), a);

    std::vector<ClientUpdate> doubled = u;
    doubled[2].delta *= 2.0;
    const ParamVector b = aggregate(doubled, w, 0.5, 3.0, u[0].delta);
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(b[j] - a[j], w[2] * u[2].delta[j] / 1.5, 1e-12);
    }
  }
}

TEST(AggregateTest, ShapeMismatchRejected) {
  std::vector<ClientUpdate> u{{vec({1, 2}), 1, 0}, {vec({1}), 1, 1}};
  EXPECT_THROW(aggregate(u, std::vector<double>{1, 1}, 1.0, 2.0, vec({0, 0})), ShapeError);
}

TEST(NoisyUpdateTest, ZeroSigmaIsExact) {
  Rng rng(1);
  EXPECT_EQ(noisy_update(vec({1, 2}), vec({0.5, -1}), 0.0, rng), vec({1.5, 1}));
  EXPECT_EQ(noisy_update(vec({1, 2}), vec({0, 0}), 0.0, rng), vec({1, 2}));
}

TEST(NoisyUpdateTest, EmpiricalMoments) {
  Rng rng(77);
  const std::size_t n = 100000;
  ParamVector z = ParamVector::from_values(std::vector<double>(n, 0.0));
  ParamVector y = noisy_update(z, z, 0.1, rng);
  double mean = 0.0;
  for (double v : y.values()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : y.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  EXPECT_GE(sd, 0.0995);
  EXPECT_LE(sd, 0.1005);
  EXPECT_LE(std::abs(mean), 0.001);
  Rng again(77);
  EXPECT_EQ(noisy_update(z, z, 0.1, again), y);
}

ServerConfig quiet_config() {
  ServerConfig c;
  c.q = 1.0;
  c.S = 1e9;
  c.C = 1e9;
  c.sigma = 0.0;
  c.w_hat = 1.0;
  return c;
}

TEST(LocalTrainTest, NoEpochsOrZeroRateGivesZeroDelta) {
  auto ls = LeastSquares::random(10, 3, 1);
  ParamVector g = vec({0.1, -0.2, 0.3});
  ServerConfig c = quiet_config();
  c.local_epochs = 0;
  Rng rng(1);
  EXPECT_EQ(local_train(g, iota_ids(10), c, ls, rng).update.delta, vec({0, 0, 0}));
  c.local_epochs = 2;
  c.eta = 0.0;
  EXPECT_EQ(local_train(g, iota_ids(10), c, ls, rng).update.delta, vec({0, 0, 0}));
}

TEST(LocalTrainTest, MomentumStepsMatchHandStepping) {
  auto ls = LeastSquares::random(4, 3, 2);
  ParamVector g = vec({0.5, -0.5, 1.0});
  ServerConfig c = quiet_config();
  c.batch_size = 4;
  c.local_epochs = 3;
  c.eta = 0.05;
  c.momentum = 0.9;
  Rng rng(1);
  LocalResult r = local_train(g, iota_ids(4), c, ls, rng, 7);
  EXPECT_EQ(r.update.client_id, 7u);
  EXPECT_EQ(r.update.n_k, 4u);
  EXPECT_EQ(r.steps, 3u);

  // Full-batch steps: the gradient does not depend on shuffle order up to
  // summation order, so compare within 1e-12.
  std::vector<double> th{0.5, -0.5, 1.0}, v(3, 0.0);
  for (int step = 0; step < 3; ++step) {
    std::vector<double> grad(3, 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
      double res = -ls.b[i];
      for (int j = 0; j < 3; ++j) res += ls.a[i][j] * th[j];
      for (int j = 0; j < 3; ++j) grad[j] += res * ls.a[i][j] / 4.0;
    }
    for (int j = 0; j < 3; ++j) {
      v[j] = 0.9 * v[j] + grad[j];
      th[j] -= 0.05 * v[j];
    }
  }
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(r.update.delta[j], th[j] - g[j], 1e-12);
}

TEST(LocalTrainTest, SingleSegmentationStepMatchesGradientOracle) {
  model::MUnetConfig mc;
  mc.stages = 1;
  mc.base_channels = 1;
  mc.input_size = 8;
  mc.stem_levels = 1;
  mc.stem_channels = 2;
  model::MUnet net(mc);
  std::vector<data::MultiModalSample> samples(2);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& s : samples) {
    s.height = s.width = 8;
    s.images.assign(4, std::vector<double>(64));
    for (auto& img : s.images)
      for (double& x : img) x = u(rng);
    s.labels.assign(64, 0);
    for (std::size_t i = 20; i < 40; ++i) s.labels[i] = 2;
  }
  model::SegmentationObjective obj(net, samples);
  ParamVector theta0 = net.init(3);
  ServerConfig c = quiet_config();
  c.batch_size = 2;
  c.local_epochs = 1;
  c.eta = 0.01;
  Rng r(1);
  LocalResult res = local_train(theta0, iota_ids(2), c, obj, r);

  ParamVector ga, gb;
  net.loss_and_grad(theta0, std::vector<const data::MultiModalSample*>{&samples[0]}, ga);
  net.loss_and_grad(theta0, std::vector<const data::MultiModalSample*>{&samples[1]}, gb);
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    const double expect = -0.01 * 0.5 * (ga[i] + gb[i]);
    EXPECT_NEAR(res.update.delta[i], expect, 1e-12 * std::max(1.0, std::abs(expect))) << i;
  }
}

TEST(LocalTrainTest, UploadRespectsClipBound) {
  auto ls = LeastSquares::random(40, 6, 3);
  ParamVector g = vec({3, -3, 2, 1, 0, 5});
  ServerConfig c = quiet_config();
  c.batch_size = 5;
  c.eta = 0.2;
  c.S = 0.05;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    LocalResult r = local_train(g, iota_ids(40), c, ls, rng);
    EXPECT_LE(r.update.delta.norm(), c.S + 1e-9);
    EXPECT_GT(r.clipped_steps, 0u);
  }
}

TEST(LocalTrainTest, NonFiniteLossFailsClient) {
  auto ls = LeastSquares::random(4, 2, 1);
  ls.poison = true;
  Rng rng(1);
  LocalResult r = local_train(vec({0, 0}), iota_ids(4), quiet_config(), ls, rng);
  EXPECT_TRUE(r.failed);
  EXPECT_NE(r.diagnostic.find("non-finite"), std::string::npos);
}

TEST(LocalTrainTest, OverflowingStepFailsClient) {
  auto ls = LeastSquares::random(4, 2, 1);
  ServerConfig c = quiet_config();
  c.eta = 1e308;
  c.momentum = 0.0;
  Rng rng(1);
  LocalResult r = local_train(vec({1e10, -1e10}), iota_ids(4), c, ls, rng);
  EXPECT_TRUE(r.failed);
  EXPECT_NE(r.diagnostic.find("non-finite parameters"), std::string::npos);
  EXPECT_EQ(r.update.delta, vec({0, 0}));
}

std::vector<std::vector<std::size_t>> split_shards(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> s(k);
  for (std::size_t i = 0; i < n; ++i) s[i % k].push_back(i);
  return s;
}

TEST(FederationTest, SingleClientEqualsCentralizedRestartedSgd) {
  auto ls = LeastSquares::random(12, 4, 8);
  ServerConfig c = quiet_config();
  c.batch_size = 5;
  c.local_epochs = 2;
  c.rounds = 5;
  c.eta = 0.05;
  c.seed = 11;
  Federation fed(c, ls, split_shards(12, 1));
  ParamVector global = vec({0.2, -0.1, 0.4, 0.0});
  std::vector<double> central(global.values().begin(), global.values().end());
  for (std::size_t t = 1; t <= c.rounds; ++t) {
    fed.run_round(global, t);
    // Centralized oracle: same shuffle stream, fresh momentum each round.
    Rng rng = make_rng(c.seed, "client", t, 0);
    std::vector<std::size_t> order = iota_ids(12);
    std::vector<double> v(4, 0.0);
    for (std::size_t e = 0; e < c.local_epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < 12; s += 5) {
        const std::size_t len = std::min<std::size_t>(5, 12 - s);
        std::vector<double> grad(4, 0.0);
        for (std::size_t bi = s; bi < s + len; ++bi) {
          const std::size_t i = order[bi];
          double res = -ls.b[i];
          for (int j = 0; j < 4; ++j) res += ls.a[i][j] * central[j];
          for (int j = 0; j < 4; ++j) grad[j] += res * ls.a[i][j];
        }
        for (int j = 0; j < 4; ++j) {
          v[j] = 0.95 * v[j] + grad[j] * (1.0 / static_cast<double>(len));
          central[j] -= 0.05 * v[j];
        }
      }
    }
    for (int j = 0; j < 4; ++j) {
      const double denom = std::max(std::abs(central[j]), std::abs(global[j]));
      EXPECT_LE(std::abs(central[j] - global[j]), 1e-12 * denom) << "round " << t;
    }
  }
}

TEST(FederationTest, ZeroDeltasAreFixedPoint) {
  auto ls = LeastSquares::random(12, 3, 1);
  ServerConfig c = quiet_config();
  c.eta = 0.0;
  c.rounds = 3;
  Federation fed(c, ls, split_shards(12, 3));
  ParamVector g = vec({1, 2, 3});
  auto logs = fed.run(g);
  EXPECT_EQ(g, vec({1, 2, 3}));
  EXPECT_EQ(logs.size(), 3u);
  for (const auto& l : logs) EXPECT_EQ(l.sampled.size(), 3u);
}

TEST(FederationTest, DeterministicAcrossRunsAndJobCounts) {
  auto ls = LeastSquares::random(30, 5, 4);
  ServerConfig c;
  c.rounds = 6;
  c.batch_size = 4;
  c.S = 0.5;
  c.C = 0.3;
  c.seed = 99;
  auto run = [&](std::size_t jobs, double sigma) {
    ServerConfig cc = c;
    cc.sigma = sigma;
    Federation fed(cc, ls, split_shards(30, 4));
    fed.set_jobs(jobs);
    ParamVector g = ParamVector::from_values(std::vector<double>(5, 0.1));
    auto logs = fed.run(g);
    return std::make_pair(g, logs);
  };
  auto [a, la] = run(1, 0.0);
  auto [b, lb] = run(1, 0.0);
  auto [p, lp] = run(3, 0.0);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, p);
  for (std::size_t t = 0; t < la.size(); ++t) {
    EXPECT_EQ(la[t].sampled, lp[t].sampled);
    EXPECT_EQ(la[t].aggregate_norm, lp[t].aggregate_norm);
    EXPECT_LE(la[t].aggregate_norm_clipped, c.C + 1e-12);
  }
  auto [n1, ln1] = run(1, 0.01);
  auto [n2, ln2] = run(2, 0.01);
  EXPECT_EQ(n1, n2);
  EXPECT_FALSE(n1 == a);
}

TEST(FederationTest, DroppedUploadsMarkClientsFailed) {
  auto ls = LeastSquares::random(12, 3, 1);
  ServerConfig c = quiet_config();
  c.rounds = 2;
  Federation fed(c, ls, split_shards(12, 3));
  fed.channel().set_drop_hook([](std::size_t round, std::size_t client) { return round == 1 && client == 1; });
  ParamVector g = vec({0, 0, 0});
  RoundLog l1 = fed.run_round(g, 1);
  ASSERT_EQ(l1.clients.size(), 3u);
  EXPECT_FALSE(l1.clients[0].failed);
  EXPECT_TRUE(l1.clients[1].failed);
  EXPECT_EQ(l1.clients[1].diagnostic, "upload dropped");
  EXPECT_FALSE(l1.noop);

  fed.channel().set_drop_hook([](std::size_t, std::size_t) { return true; });
  ParamVector before = g;
  RoundLog l2 = fed.run_round(g, 2);
  EXPECT_TRUE(l2.noop);
  EXPECT_EQ(g, before);
}

TEST(FederationTest, FailingObjectiveYieldsNoopRound) {
  auto ls = LeastSquares::random(8, 2, 1);
  ls.poison = true;
  Federation fed(quiet_config(), ls, split_shards(8, 2));
  ParamVector g = vec({1, 1});
  RoundLog l = fed.run_round(g, 1);
  EXPECT_TRUE(l.noop);
  EXPECT_TRUE(l.clients[0].failed);
  EXPECT_EQ(g, vec({1, 1}));
}

TEST(ServerConfigTest, InvalidValuesRejected) {
  ServerConfig c;
  c.q = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ServerConfig{};
  c.S = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ServerConfig{};
  c.sigma = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ServerConfig{};
  c.w_hat = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace mmfed::fed
