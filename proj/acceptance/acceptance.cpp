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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.
//
//   mmfed_acceptance [--only 1,5,9] [--workdir DIR] [--cli PATH] [--jobs N]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmfed/experiment.hpp"
#include "mmfed/nifti.hpp"
#include "support/gradcheck.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mmfed;
using testing::grad_check;
using testing::random_tensor;
using testing::weighted_readout;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1. Single-client federation with inert clipping and no noise versus plain
// SGD with momentum restarted from the broadcast point every round.
Outcome protocol_reduction() {
  const auto t0 = std::chrono::steady_clock::now();
  model::MUnetConfig mc;
  mc.input_size = 16;
  mc.stem_levels = 1;
  mc.stages = 2;
  mc.base_channels = 4;
  const model::MUnet net(mc);
  const auto samples = data::generate_synthetic_dataset(24, {16, 0.05}, 5);
  const model::SegmentationObjective obj(net, samples);

  fed::ServerConfig c;
  c.q = 1.0;
  c.sigma = 0.0;
  c.S = c.C = 1e9;
  c.rounds = 5;
  c.seed = 17;
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  fed::Federation<model::SegmentationObjective> fedn(c, obj, {all});
  ParamVector global = net.init(3);

  double worst = 0.0;
  std::size_t compared = 0;
  for (std::size_t t = 1; t <= c.rounds; ++t) {
    // The oracle restarts from the point the server broadcasts this round.
    ParamVector central = global;
    fedn.run_round(global, t);
    Rng rng = make_rng(c.seed, "client", t, 0);
    std::vector<std::size_t> order = all;
    std::vector<double> v(central.size(), 0.0);
    ParamVector grad;
    for (std::size_t e = 0; e < c.local_epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < order.size(); s += c.batch_size) {
        const std::size_t len = std::min(c.batch_size, order.size() - s);
        std::vector<const data::MultiModalSample*> batch;
        for (std::size_t i = s; i < s + len; ++i) batch.push_back(&samples[order[i]]);
        net.loss_and_grad(central, batch, grad);
        for (std::size_t j = 0; j < central.size(); ++j) {
          v[j] = c.momentum * v[j] + grad[j];
          central[j] -= c.eta * v[j];
        }
      }
    }
    for (std::size_t j = 0; j < central.size(); ++j) {
      const double denom = std::max(std::abs(central[j]), std::abs(global[j]));
      if (denom > 0.0) worst = std::max(worst, std::abs(central[j] - global[j]) / denom);
      ++compared;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && secs < 60.0,
          "max relative error " + num(worst) + " (tol 1e-12) over " + std::to_string(compared) +
              " coordinates in 5 rounds, " + num(secs, 3) + " s (limit 60 s)"};
}

// 2. Clip bounds, direction and exactness over norms spanning 12 decades.
Outcome clipping_invariants() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  std::uniform_real_distribution<double> logn(-6.0, 6.0), u(-1.0, 1.0), logb(-2.0, 2.0);
  std::size_t bad = 0, exact_cases = 0;
  double worst_excess = 0.0;
  for (int trial = 0; trial < 100000; ++trial) {
    std::vector<double> x(dim(rng));
    for (double& v : x) v = u(rng);
    double n = 0.0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    if (n == 0.0) continue;
    const double target = std::pow(10.0, logn(rng));
    for (double& v : x) v *= target / n;
    const ParamVector p = ParamVector::from_values(x);
    const double bound = std::pow(10.0, logb(rng));
    for (int which = 0; which < 2; ++which) {
      const ParamVector out = which == 0 ? fed::flat_clip(p, bound) : fed::server_clip(p, bound);
      const double on = out.norm(), in = p.norm();
      worst_excess = std::max(worst_excess, on - bound);
      bool ok = on <= bound + 1e-9;
      if (in <= bound) {
        ++exact_cases;
        ok = ok && out == p;
      }
      const double r = on / in;
      for (std::size_t j = 0; j < x.size() && ok; ++j) {
        ok = out[j] * x[j] >= 0.0 && std::abs(out[j] - r * x[j]) <= 1e-12 * std::abs(r * x[j]) + 1e-300;
      }
      bad += !ok;
    }
  }
  return {bad == 0, std::to_string(bad) + " violations in 2 x 10^5 clips (" + std::to_string(exact_cases) +
                        " no-op cases), max norm excess " + num(worst_excess)};
}

// 3. Weighted aggregation against a separately coded weighted mean.
Outcome aggregation_oracle() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> nclients(1, 8), dim(1, 50), nk(1, 100);
  std::uniform_real_distribution<double> u(-1.0, 1.0), uq(0.05, 1.0), uw(10.0, 60.0);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = nclients(rng), d = dim(rng);
    const double q = uq(rng), w_hat = uw(rng);
    std::vector<std::size_t> ids(k);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<fed::ClientUpdate> ups;
    std::vector<double> weights;
    double W = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<double> v(d);
      for (double& x : v) x = u(rng);
      const std::size_t n = nk(rng);
      ups.push_back({ParamVector::from_values(v), n, ids[i]});
      weights.push_back(std::min(static_cast<double>(n) / w_hat, 1.0));
      W += weights.back();
    }
    W += 0.5;  // registered clients that were not sampled
    const ParamVector zero = ParamVector::from_values(std::vector<double>(d, 0.0));
    const ParamVector got = fed::aggregate(ups, weights, q, W, zero);

    std::vector<std::size_t> by_id(k);
    for (std::size_t i = 0; i < k; ++i) by_id[ups[i].client_id] = i;
    std::vector<double> want(d, 0.0);
    for (std::size_t id = 0; id < k; ++id) {
      const std::size_t i = by_id[id];
      for (std::size_t j = 0; j < d; ++j) want[j] += weights[i] * ups[i].delta[j];
    }
    for (double& x : want) x /= q * W;

    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<fed::ClientUpdate> ups2;
    std::vector<double> w2;
    for (std::size_t i : perm) ups2.push_back(ups[i]), w2.push_back(weights[i]);
    const ParamVector again = fed::aggregate(ups2, w2, q, W, zero);

    bool ok = again == got;
    for (std::size_t j = 0; j < d; ++j) ok = ok && got[j] == want[j];
    mismatches += !ok;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 1000 instances differ bitwise from the oracle"};
}

// 4. Gaussian noise moments.
Outcome noise_calibration() {
  const std::size_t n = 100000;
  const double sigma = 0.1;
  const ParamVector zero = ParamVector::from_values(std::vector<double>(n, 0.0));
  Rng rng = make_rng(4, "noise", 1);
  const ParamVector out = fed::noisy_update(zero, zero, sigma, rng);
  double mean = 0.0;
  for (double v : out.values()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : out.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  const double rel = std::abs(sd - sigma) / sigma;
  return {rel <= 0.005 && std::abs(mean) <= 0.001,
          "std " + num(sd, 6) + " (rel dev " + num(rel * 100, 3) + "%, tol 0.5%), mean " + num(mean, 3) +
              " (tol 0.001)"};
}

// 5. Central finite differences for every operator and the full model loss.
Outcome gradient_suite() {
  using namespace mmfed::ad;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(5);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0, skipped = 0, failures = 0;
  auto check = [&](const std::string& name, std::vector<Tensor> in, auto fn) {
    const auto res = grad_check(std::move(in), fn);
    checked += res.checked;
    skipped += res.skipped;
    if (res.max_rel_error > worst) worst = res.max_rel_error, worst_name = name;
    if (!(res.max_rel_error <= 1e-5) || res.checked == 0) {
      ++failures;
      std::cerr << "  gradient check " << name << ": " << res.max_rel_error << " " << res.worst << "\n";
    }
  };
  auto readout = [](Tape& tp, Var y) { return weighted_readout(tp, y); };
  const std::size_t c = 4, h = 16, w = 16, t = 6, d = 5;
  check("conv2d", {random_tensor({c, h, w}, rng), random_tensor({2, c, 3, 3}, rng), random_tensor({2}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, conv2d(l[0], l[1], l[2], 1, 1)); });
  check("conv2d stride 2", {random_tensor({c, h, w}, rng), random_tensor({3, c, 3, 3}, rng), random_tensor({3}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, conv2d(l[0], l[1], l[2], 2, 1)); });
  check("conv2d 1x1", {random_tensor({c, h, w}, rng), random_tensor({2, c, 1, 1}, rng), random_tensor({2}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, conv2d(l[0], l[1], l[2])); });
  check("max_pool2", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, max_pool2(l[0])); });
  check("upsample2", {random_tensor({c, 8, 8}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, upsample2(l[0])); });
  check("resample down", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, resample(l[0], Resample::kDown2)); });
  check("resample up", {random_tensor({c, 8, 8}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, resample(l[0], Resample::kUp2)); });
  check("concat_channels", {random_tensor({2, h, w}, rng), random_tensor({2, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, concat_channels(l[0], l[1])); });
  check("slice_channels", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, slice_channels(l[0], 1, 2)); });
  check("relu", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, relu(l[0])); });
  check("sigmoid", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, sigmoid(l[0])); });
  check("softmax_rows", {random_tensor({t, d}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, softmax_rows(l[0])); });
  check("softmax_channels", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, softmax_channels(l[0])); });
  check("layer_norm", {random_tensor({t, d}, rng), random_tensor({d}, rng), random_tensor({d}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, layer_norm(l[0], l[1], l[2])); });
  check("linear", {random_tensor({t, d}, rng), random_tensor({d, 3}, rng), random_tensor({3}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, linear(l[0], l[1], l[2])); });
  check("matmul", {random_tensor({t, d}, rng), random_tensor({d, 3}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, matmul(l[0], l[1])); });
  check("transpose", {random_tensor({t, d}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, transpose(l[0])); });
  check("reshape", {random_tensor({c, h, w}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, reshape(l[0], {c, h * w})); });
  check("slice_cols/concat_cols", {random_tensor({t, d}, rng)}, [&](Tape& tp, const std::vector<Var>& l) {
    return readout(tp, concat_cols({slice_cols(l[0], 2, 3), slice_cols(l[0], 0, 2)}));
  });
  check("scaled_attention", {random_tensor({t, d}, rng), random_tensor({t, d}, rng), random_tensor({t, d}, rng)},
        [&](Tape& tp, const std::vector<Var>& l) { return readout(tp, scaled_attention(l[0], l[1], l[2])); });
  check("add/sub/mul/div/scale/add_scalar/mean",
        {random_tensor({c, h, w}, rng), random_tensor({c, h, w}, rng, 0.5, 2.0)},
        [&](Tape& tp, const std::vector<Var>& l) {
          Var y = div(sub(mul(l[0], l[1]), add_scalar(scale(l[0], 0.3), 0.1)), l[1]);
          return add(readout(tp, add(y, l[0])), mean(l[1]));
        });
  check("log/clamp/sum", {random_tensor({c, h, w}, rng, 0.05, 0.95)},
        [&](Tape&, const std::vector<Var>& l) { return sum(log(clamp(l[0], 1e-7, 1.0 - 1e-7))); });
  check("dice_loss", {random_tensor({h, w}, rng, 0.05, 0.95)}, [&](Tape& tp, const std::vector<Var>& l) {
    Tensor y({h, w});
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (i * 7) % 3 == 0;
    return model::dice_loss(l[0], tp.constant(y));
  });
  check("ce_loss", {random_tensor({h, w}, rng, 0.05, 0.95)}, [&](Tape& tp, const std::vector<Var>& l) {
    Tensor y({h, w});
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (i * 5) % 4 == 0;
    return model::ce_loss(l[0], tp.constant(y));
  });

  auto model_check = [&](const std::string& name, model::MUnetConfig mc, std::uint64_t seed) {
    const model::MUnet net(mc);
    ParamVector p = net.init(seed);
    std::mt19937_64 r(seed + 1);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (double& v : p.values()) v += u(r);
    data::SyntheticConfig sc{mc.input_size, 0.05};
    Rng srng = make_rng(seed, "data", 0);
    const auto s = data::generate_synthetic_sample(sc, srng);
    check(name, p.unflatten(), [&](Tape& tape, const std::vector<Var>& leaves) {
      return net.loss(tape, net.forward(tape, net.from_leaves(leaves), s), s);
    });
  };
  model::MUnetConfig mc;
  mc.input_size = 16;
  mc.stem_levels = 1;
  mc.stem_channels = 2;
  mc.stages = 2;
  mc.base_channels = 1;
  model_check("M-Unet binary loss, 4x16x16", mc, 51);
  mc.classes = 4;
  model_check("M-Unet 4-class loss, 4x16x16", mc, 52);

  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 300.0,
          std::to_string(failures) + " failing checks, max relative error " + num(worst) + " (" + worst_name +
              ", tol 1e-5), " + std::to_string(checked) + " coordinates checked, " + std::to_string(skipped) +
              " at kinks skipped, " + num(secs, 3) + " s (limit 300 s)"};
}

// 6. Cross-modality module output shape over a configuration grid.
Outcome cmm_shape_law() {
  std::size_t cases = 0, bad = 0;
  auto check = [&](const model::MUnetConfig& mc, std::size_t stage, std::size_t ci, std::size_t hi, std::size_t wi) {
    const model::MUnet net(mc);
    const ParamVector p = net.init(cases + 1);
    ad::Tape tape;
    const auto b = net.bind(tape, p, false);
    std::mt19937_64 rng(cases);
    std::vector<ad::Var> feats;
    for (std::size_t m = 0; m < mc.modalities; ++m) feats.push_back(tape.constant(random_tensor({ci, hi, wi}, rng)));
    const Shape got = net.cmm_forward(b, stage, feats).shape();
    ++cases;
    if (got != Shape{4 * ci, hi / 2, wi / 2}) {
      ++bad;
      std::cerr << "  cmm C=" << ci << " H=" << hi << " W=" << wi << " -> " << shape_str(got) << "\n";
    }
  };
  for (std::size_t ci : {1u, 2u, 4u, 8u}) {
    for (std::size_t hi : {2u, 4u, 8u, 16u}) {
      for (std::size_t wi : {2u, 4u, 8u, 16u}) {
        for (std::size_t kernel : {1u, 3u}) {
          model::MUnetConfig mc;
          mc.stages = 1;
          mc.stem_levels = 0;
          mc.base_channels = ci;
          mc.input_size = hi;
          mc.input_width = wi;
          mc.cmm_kernel = kernel;
          check(mc, 1, ci, hi, wi);
        }
      }
    }
  }
  const model::MUnetConfig def;
  for (std::size_t s = 1; s <= def.stages; ++s) {
    const std::size_t size = def.level_size(def.stage_level(s));
    check(def, s, def.stage_channels(s), size, size);
  }
  return {bad == 0, std::to_string(cases - bad) + "/" + std::to_string(cases) +
                        " (C, H, W) configurations give (4C, H/2, W/2)"};
}

// 7. Jaccard/Dice identity, exact Hausdorff acceleration, HD(A, A) = 0.
Outcome metric_identities() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> side(1, 32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t jac_bad = 0, hd_bad = 0, self_bad = 0;
  double jac_worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t h = side(rng), w = side(rng);
    const double pa = u(rng), pb = u(rng);
    data::Mask a(h * w), b(h * w);
    for (auto& v : a) v = u(rng) < pa;
    for (auto& v : b) v = u(rng) < pb;
    const auto om = metrics::overlap_metrics(metrics::confusion_counts(a, b));
    const double err = std::abs(om.jaccard - om.dice / (2.0 - om.dice));
    jac_worst = std::max(jac_worst, err);
    jac_bad += err > 1e-12;
    const auto fast = metrics::hausdorff_distance(a, b, h, w);
    const auto slow = metrics::hausdorff_brute_force(a, b, h, w);
    hd_bad += fast != slow;
    const auto self = metrics::hausdorff_distance(a, a, h, w);
    self_bad += !(self && *self == 0.0);
  }
  return {jac_bad == 0 && hd_bad == 0 && self_bad == 0,
          "10^4 random masks up to 32x32: jaccard identity max error " + num(jac_worst) + " (tol 1e-12), " +
              std::to_string(hd_bad) + " Hausdorff mismatches vs brute force, " + std::to_string(self_bad) +
              " nonzero HD(A, A)"};
}

// 8. Dirichlet(2, 2, 2, 2) component moments.
Outcome dirichlet_moments() {
  const double alpha = 2.0;
  const std::size_t n = 4, draws = 10000;
  const double a0 = alpha * static_cast<double>(n);
  const double mean_cf = alpha / a0;
  const double var_cf = alpha * (a0 - alpha) / (a0 * a0 * (a0 + 1.0));
  Rng rng = make_rng(8, "partition");
  std::vector<double> s(n, 0.0), s2(n, 0.0);
  for (std::size_t t = 0; t < draws; ++t) {
    const auto w = data::dirichlet_sample(n, alpha, rng);
    for (std::size_t k = 0; k < n; ++k) s[k] += w[k], s2[k] += w[k] * w[k];
  }
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double m = s[k] / draws;
    const double v = s2[k] / draws - m * m;
    worst_mean = std::max(worst_mean, std::abs(m - mean_cf) / mean_cf);
    worst_var = std::max(worst_var, std::abs(v - var_cf) / var_cf);
  }
  return {worst_mean <= 0.02 && worst_var <= 0.10,
          "closed form mean " + num(mean_cf) + ", variance " + num(var_cf, 6) + "; worst relative deviation " +
              num(worst_mean * 100, 3) + "% (tol 2%) and " + num(worst_var * 100, 3) + "% (tol 10%)"};
}

// 9. Default synthetic run against a FLAIR-only ablation and the untrained
// model, all scored on the held-out test split.
Outcome learning_smoke(const fs::path& work, std::size_t jobs) {
  const auto t0 = std::chrono::steady_clock::now();
  exp::ExperimentConfig cfg;
  exp::RunOptions opt;
  opt.jobs = jobs;
  opt.out_dir = (work / "learning_full").string();
  const auto full = exp::run_experiment(cfg, opt);
  const model::MUnet net(cfg.resolved_model());
  const auto& ds = full.dataset;
  auto wt_dice = [&](const exp::RunResult& r, const ParamVector& p) {
    return exp::evaluate_indices(net, p, r.dataset.samples, r.dataset.split.test, cfg.threshold)
        .at(data::Region::kWT, metrics::kDice)
        .mean;
  };
  const double trained = wt_dice(full, full.final_model);
  const double untrained = wt_dice(full, full.initial);

  exp::ExperimentConfig abl = cfg;
  abl.data.modalities = {data::kFlair};
  opt.out_dir = (work / "learning_flair_only").string();
  const auto ablated = exp::run_experiment(abl, opt);
  const double flair_only = wt_dice(ablated, ablated.final_model);
  const bool same_split = ablated.dataset.split.test == ds.split.test;

  const double secs = seconds_since(t0);
  return {trained >= 0.85 && trained > flair_only && trained > untrained && same_split && secs <= 1800.0,
          "test WT dice " + num(trained) + " (need >= 0.85), FLAIR-only ablation " + num(flair_only) +
              ", round 0 " + num(untrained) + ", " + std::to_string(ds.split.test.size()) + " test samples, " +
              num(secs, 4) + " s (limit 1800 s)"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string strip_timing(const std::string& jsonl) {
  std::istringstream in(jsonl);
  std::string out;
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::ordered_json::parse(line);
    j.erase("duration_s");
    out += j.dump() + "\n";
  }
  return out;
}

// 10. Two separate executions of the CLI with sigma = 0.
Outcome determinism(const fs::path& work, const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found: '" + cli + "'"};
  const fs::path cfg_path = work / "determinism.ini";
  exp::write_text(cfg_path, "[experiment]\nseed = 1234\n\n[server]\nrounds = 8\nnoise_profile = none\n");
  const fs::path a = work / "determinism_a", b = work / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  auto run = [&](const fs::path& out, int jobs) {
    const std::string cmd = "\"" + cli + "\" run --config \"" + cfg_path.string() + "\" --out \"" + out.string() +
                            "\" --jobs " + std::to_string(jobs) + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  const int ra = run(a, 1), rb = run(b, 2);
  if (ra != 0 || rb != 0) return {false, "run exit codes " + std::to_string(ra) + ", " + std::to_string(rb)};
  std::vector<std::string> differing;
  for (const char* f : {exp::kModelFile, exp::kValidationFile, exp::kPartitionFile, exp::kHistogramFile}) {
    if (slurp(a / f) != slurp(b / f)) differing.push_back(f);
  }
  const std::string la = slurp(a / exp::kRoundsFile), lb = slurp(b / exp::kRoundsFile);
  if (strip_timing(la) != strip_timing(lb)) differing.push_back(exp::kRoundsFile);
  const auto lines = std::count(la.begin(), la.end(), '\n');
  std::string detail = "model file " + std::to_string(fs::file_size(a / exp::kModelFile)) + " bytes, " +
                       std::to_string(lines) + " round records; jobs 1 vs 2; ";
  if (differing.empty()) return {lines == 8, detail + "all artifacts identical"};
  std::string list;
  for (const auto& f : differing) list += (list.empty() ? "" : ", ") + f;
  return {false, detail + "differing: " + list};
}

// 11. float32 NIfTI volumes written and re-read bit-exactly; every single
// byte mutation of the magic rejected.
Outcome nifti_round_trip(const fs::path& work) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-1e6f, 1e6f);
  std::size_t volumes = 0, bad = 0;
  for (const auto& dims : {std::array<std::size_t, 3>{7, 5, 3}, std::array<std::size_t, 3>{16, 16, 4},
                           std::array<std::size_t, 3>{1, 1, 1}}) {
    for (bool be : {false, true}) {
      for (const char* ext : {".nii", ".nii.gz"}) {
        data::NiftiVolume v;
        v.dim = dims;
        v.pixdim = {1.0, 0.5, 2.5};
        v.datatype = data::kNiftiFloat32;
        v.big_endian = be;
        std::vector<float> raw(v.voxels());
        for (float& f : raw) f = u(rng);
        if (raw.size() > 4) {
          raw[0] = -0.0f;
          raw[1] = std::numeric_limits<float>::denorm_min();
          raw[2] = std::numeric_limits<float>::max();
          raw[3] = std::numeric_limits<float>::lowest();
        }
        v.data.assign(raw.begin(), raw.end());
        const fs::path path = work / ("volume_" + std::to_string(volumes) + ext);
        data::write_nifti(path.string(), v);
        const auto back = data::read_nifti(path.string());
        bool ok = back.dim == v.dim && back.datatype == data::kNiftiFloat32 && back.data.size() == raw.size();
        for (std::size_t i = 0; ok && i < raw.size(); ++i) {
          ok = std::bit_cast<std::uint32_t>(static_cast<float>(back.data[i])) == std::bit_cast<std::uint32_t>(raw[i]);
        }
        bad += !ok;
        ++volumes;
      }
    }
  }
  data::NiftiVolume v;
  v.dim = {4, 4, 2};
  v.data.assign(32, 0.25);
  const io::Bytes good = data::encode_nifti(v);
  std::size_t mutations = 0, accepted = 0;
  for (std::size_t off = 344; off < 348; ++off) {
    for (int val = 0; val < 256; ++val) {
      if (val == good[off]) continue;
      io::Bytes m = good;
      m[off] = static_cast<std::uint8_t>(val);
      ++mutations;
      try {
        data::parse_nifti(m);
        ++accepted;
      } catch (const FormatError&) {
      }
    }
  }
  return {bad == 0 && accepted == 0 && mutations == 1020,
          std::to_string(volumes - bad) + "/" + std::to_string(volumes) + " float32 volumes bit-exact (LE/BE, gz), " +
              std::to_string(mutations - accepted) + "/" + std::to_string(mutations) + " magic mutations rejected"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmfed acceptance suite"};
  std::vector<int> only;
  std::string workdir = (fs::temp_directory_path() / "mmfed_acceptance").string();
  std::string cli = MMFED_CLI_PATH;
  std::size_t jobs = 1;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--workdir", workdir, "Scratch directory for run outputs");
  app.add_option("--cli", cli, "Path to the mmfed executable");
  app.add_option("--jobs", jobs, "Parallel client workers for training runs");
  CLI11_PARSE(app, argc, argv);

  const fs::path work(workdir);
  fs::create_directories(work);
  const std::vector<Criterion> all{
      {1, "protocol reduction oracle", protocol_reduction},
      {2, "clipping invariants", clipping_invariants},
      {3, "aggregation oracle", aggregation_oracle},
      {4, "noise calibration", noise_calibration},
      {5, "gradient suite", gradient_suite},
      {6, "CMM shape law", cmm_shape_law},
      {7, "metric identities", metric_identities},
      {8, "Dirichlet moments", dirichlet_moments},
      {9, "desk-scale learning", [&] { return learning_smoke(work, jobs); }},
      {10, "determinism", [&] { return determinism(work, cli); }},
      {11, "NIfTI round trip", [&] { return nifti_round_trip(work); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
