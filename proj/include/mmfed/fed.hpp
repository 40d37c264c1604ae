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

// Differentially private federated averaging. Clients run local SGD with
// momentum and clip their accumulated update after every batch; the server
// samples clients, forms a weighted aggregate, clips it and adds Gaussian
// noise before applying it to the global model.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mmfed/errors.hpp"
#include "mmfed/param_vector.hpp"
#include "mmfed/rng.hpp"

namespace mmfed::fed {

struct ServerConfig {
  double eta = 1e-2;
  double momentum = 0.95;
  std::size_t local_epochs = 3;
  std::size_t batch_size = 8;
  std::size_t rounds = 30;
  double q = 0.5;
  double S = 10.0;      // client flat-clip bound
  double C = 10.0;      // server clip bound
  double sigma = 0.0;   // per-coordinate noise std
  double w_hat = 32.0;  // per-user example cap
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid server config: " + what); };
    if (!(q > 0.0 && q <= 1.0)) fail("0 < q <= 1 (got " + std::to_string(q) + ")");
    if (!(S > 0.0)) fail("S > 0");
    if (!(C > 0.0)) fail("C > 0");
    if (!(sigma >= 0.0)) fail("sigma >= 0");
    if (!(w_hat >= 1.0)) fail("w_hat >= 1");
    if (!(eta >= 0.0) || !std::isfinite(eta)) fail("eta >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("0 <= momentum < 1");
    if (batch_size < 1) fail("batch_size >= 1");
  }
};

/// delta * min(1, S / ||delta||). Returned unchanged (bit-exact) when the
/// norm is already within the bound, including the zero vector.
inline ParamVector flat_clip(const ParamVector& delta, double S) {
  if (!(S > 0.0)) throw std::invalid_argument("flat_clip: S must be > 0");
  const double n = delta.norm();
  if (n <= S) return delta;
  return delta * (S / n);
}

/// delta / max(1, ||delta|| / C).
inline ParamVector server_clip(const ParamVector& delta, double C) {
  if (!(C > 0.0)) throw std::invalid_argument("server_clip: C must be > 0");
  const double n = delta.norm();
  if (n <= C) return delta;
  ParamVector out = delta;
  const double d = n / C;
  for (double& v : out.values()) v /= d;
  return out;
}

/// min(n_k / w_hat, 1).
inline double client_weight(std::size_t n_k, double w_hat) {
  if (n_k < 1) throw std::invalid_argument("client_weight: n_k must be >= 1");
  if (!(w_hat >= 1.0)) throw std::invalid_argument("client_weight: w_hat must be >= 1");
  return std::min(static_cast<double>(n_k) / w_hat, 1.0);
}

/// Each registered client joins independently with probability q. One
/// uniform draw per client in ascending id order.
inline std::vector<std::size_t> sample_clients(std::vector<std::size_t> registered, double q, Rng& rng) {
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("sample_clients: q must be in (0, 1]");
  std::sort(registered.begin(), registered.end());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> out;
  for (std::size_t id : registered)
    if (u(rng) < q) out.push_back(id);
  return out;
}

struct ClientUpdate {
  ParamVector delta;
  std::size_t n_k = 0;
  std::size_t client_id = 0;
};

/// sum_k w_k delta_k / (q W), summed in ascending client_id order.
/// `weights[i]` belongs to `updates[i]`. An empty set yields `zero`.
inline ParamVector aggregate(std::span<const ClientUpdate> updates, std::span<const double> weights, double q,
                             double W, const ParamVector& zero) {
  if (!(W > 0.0)) throw std::invalid_argument("aggregate: W must be > 0");
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("aggregate: q must be in (0, 1]");
  if (weights.size() != updates.size()) throw std::invalid_argument("aggregate: one weight per update required");
  std::vector<std::size_t> order(updates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return updates[a].client_id < updates[b].client_id; });
  ParamVector out = zero.zeros_like();
  for (std::size_t i : order) {
    const ParamVector& d = updates[i].delta;
    out.require_compatible(d, "aggregate");
    const double w = weights[i];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * d[j];
  }
  const double denom = q * W;
  for (double& v : out.values()) v /= denom;
  return out;
}

/// theta_prev + delta + N(0, sigma^2 I).
inline ParamVector noisy_update(const ParamVector& theta_prev, const ParamVector& delta, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("noisy_update: sigma must be >= 0");
  ParamVector out = theta_prev + delta;
  if (sigma > 0.0) {
    std::normal_distribution<double> n(0.0, sigma);
    for (double& v : out.values()) v += n(rng);
  }
  return out;
}

/// Loss over a batch of example indices; writes the mean gradient.
template <class T>
concept Objective = requires(const T& o, const ParamVector& p, std::span<const std::size_t> batch, ParamVector& g) {
  { o.loss_and_grad(p, batch, g) } -> std::convertible_to<double>;
};

struct LocalResult {
  ClientUpdate update;
  bool failed = false;
  std::string diagnostic;
  double pre_clip_norm = 0.0;  // ||theta - global|| before the final clip
  double post_clip_norm = 0.0;
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::size_t clipped_steps = 0;
};

/// One client's local work for a round: theta <- global, then for every
/// epoch and batch an SGD-with-momentum step followed by
/// theta <- global + flat_clip(theta - global, S). Momentum starts at zero.
template <Objective Obj>
LocalResult local_train(const ParamVector& global, std::span<const std::size_t> shard, const ServerConfig& cfg,
                        const Obj& objective, Rng& rng, std::size_t client_id = 0) {
  if (shard.empty()) throw std::invalid_argument("local_train: empty shard");
  LocalResult res;
  res.update.client_id = client_id;
  res.update.n_k = shard.size();

  ParamVector theta = global;
  ParamVector velocity = global.zeros_like();
  ParamVector grad;
  std::vector<std::size_t> order(shard.begin(), shard.end());
  double loss_sum = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      const double loss = objective.loss_and_grad(theta, std::span(order).subspan(start, len), grad);
      if (!std::isfinite(loss) || !grad.all_finite()) {
        res.failed = true;
        res.diagnostic = "non-finite loss or gradient at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(res.steps);
        res.update.delta = global.zeros_like();
        return res;
      }
      loss_sum += loss;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + grad[i];
        theta[i] -= cfg.eta * velocity[i];
      }
      ++res.steps;
      if (!theta.all_finite()) {
        res.failed = true;
        res.diagnostic = "non-finite parameters after epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(res.steps - 1);
        res.update.delta = global.zeros_like();
        return res;
      }
      ParamVector delta = theta - global;
      res.pre_clip_norm = delta.norm();
      if (res.pre_clip_norm > cfg.S) {
        theta = global + flat_clip(delta, cfg.S);
        ++res.clipped_steps;
      }
    }
  }
  res.update.delta = theta - global;
  res.post_clip_norm = res.update.delta.norm();
  res.mean_loss = res.steps ? loss_sum / static_cast<double>(res.steps) : 0.0;
  return res;
}

/// In-process transport between server and clients. The fault hook drops a
/// client's upload for a given round.
class InProcessChannel {
 public:
  using DropHook = std::function<bool(std::size_t round, std::size_t client)>;

  void set_drop_hook(DropHook hook) { drop_ = std::move(hook); }

  ParamVector broadcast(const ParamVector& global) const { return global; }

  /// Returns false when the upload was dropped.
  bool upload(std::size_t round, ClientUpdate update) {
    if (drop_ && drop_(round, update.client_id)) return false;
    std::lock_guard lock(mu_);
    inbox_.push_back(std::move(update));
    return true;
  }

  /// All uploads received since the last call, in ascending client order.
  std::vector<ClientUpdate> collect() {
    std::lock_guard lock(mu_);
    std::vector<ClientUpdate> out = std::move(inbox_);
    inbox_.clear();
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
    return out;
  }

 private:
  DropHook drop_;
  std::mutex mu_;
  std::vector<ClientUpdate> inbox_;
};

struct ClientRoundStats {
  std::size_t client_id = 0;
  std::size_t n_k = 0;
  double weight = 0.0;
  double pre_clip_norm = 0.0;
  double post_clip_norm = 0.0;
  double mean_loss = 0.0;
  std::size_t clipped_steps = 0;
  bool failed = false;
  std::string diagnostic;
};

struct RoundLog {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  std::vector<ClientRoundStats> clients;
  double aggregate_norm = 0.0;
  double aggregate_norm_clipped = 0.0;
  std::uint64_t noise_seed = 0;
  double duration_s = 0.0;
  bool noop = false;
};

/// Server state machine over a fixed set of client shards. Client k owns
/// `shards[k]`, a list of example indices understood by the objective.
template <Objective Obj>
class Federation {
 public:
  Federation(ServerConfig cfg, const Obj& objective, std::vector<std::vector<std::size_t>> shards)
      : cfg_(cfg), objective_(objective), shards_(std::move(shards)) {
    cfg_.validate();
    if (shards_.empty()) throw std::invalid_argument("federation needs at least one client");
    for (std::size_t k = 0; k < shards_.size(); ++k) {
      if (shards_[k].empty()) throw std::invalid_argument("client " + std::to_string(k) + " has an empty shard");
      total_weight_ += client_weight(shards_[k].size(), cfg_.w_hat);
    }
  }

  const ServerConfig& config() const { return cfg_; }
  std::size_t clients() const { return shards_.size(); }
  double total_weight() const { return total_weight_; }
  InProcessChannel& channel() { return channel_; }
  void set_jobs(std::size_t jobs) { jobs_ = std::max<std::size_t>(1, jobs); }

  /// Advances `global` by one round. `round` is 1-based.
  RoundLog run_round(ParamVector& global, std::size_t round) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundLog log;
    log.round = round;
    std::vector<std::size_t> ids(shards_.size());
    for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = k;
    Rng sampler = make_rng(cfg_.seed, "sampling", round);
    log.sampled = sample_clients(ids, cfg_.q, sampler);

    const ParamVector start = channel_.broadcast(global);
    std::vector<LocalResult> results(log.sampled.size());
    run_clients(start, round, log.sampled, results);

    std::vector<ClientUpdate> updates = channel_.collect();
    std::map<std::size_t, bool> received;
    for (const ClientUpdate& u : updates) received[u.client_id] = true;
    for (std::size_t i = 0; i < log.sampled.size(); ++i) {
      const LocalResult& r = results[i];
      ClientRoundStats s;
      s.client_id = log.sampled[i];
      s.n_k = shards_[s.client_id].size();
      s.weight = client_weight(s.n_k, cfg_.w_hat);
      s.pre_clip_norm = r.pre_clip_norm;
      s.post_clip_norm = r.post_clip_norm;
      s.mean_loss = r.mean_loss;
      s.clipped_steps = r.clipped_steps;
      s.failed = r.failed || !received.contains(s.client_id);
      s.diagnostic = r.failed ? r.diagnostic : (s.failed ? "upload dropped" : "");
      log.clients.push_back(std::move(s));
    }

    std::vector<double> weights;
    for (const ClientUpdate& u : updates) weights.push_back(client_weight(u.n_k, cfg_.w_hat));
    log.noise_seed = derive_seed(cfg_.seed, "noise", round);
    if (updates.empty()) {
      log.noop = true;
    } else {
      ParamVector agg = aggregate(updates, weights, cfg_.q, total_weight_, global);
      log.aggregate_norm = agg.norm();
      agg = server_clip(agg, cfg_.C);
      log.aggregate_norm_clipped = agg.norm();
      Rng noise(log.noise_seed);
      global = noisy_update(global, agg, cfg_.sigma, noise);
    }
    log.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

  /// Rounds 1..cfg.rounds. `on_round` sees the global model after each round.
  std::vector<RoundLog> run(ParamVector& global,
                            const std::function<void(const RoundLog&, const ParamVector&)>& on_round = {}) {
    std::vector<RoundLog> logs;
    for (std::size_t t = 1; t <= cfg_.rounds; ++t) {
      logs.push_back(run_round(global, t));
      if (on_round) on_round(logs.back(), global);
    }
    return logs;
  }

 private:
  void run_clients(const ParamVector& start, std::size_t round, const std::vector<std::size_t>& sampled,
                   std::vector<LocalResult>& results) {
    auto work = [&](std::size_t i) {
      const std::size_t k = sampled[i];
      Rng rng = make_rng(cfg_.seed, "client", round, k);
      results[i] = local_train(start, shards_[k], cfg_, objective_, rng, k);
      if (!results[i].failed) channel_.upload(round, results[i].update);
    };
    const std::size_t workers = std::min(jobs_, sampled.size());
    if (workers <= 1) {
      for (std::size_t i = 0; i < sampled.size(); ++i) work(i);
      return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < sampled.size();) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  ServerConfig cfg_;
  const Obj& objective_;
  std::vector<std::vector<std::size_t>> shards_;
  double total_weight_ = 0.0;
  std::size_t jobs_ = 1;
  InProcessChannel channel_;
};

}  // namespace mmfed::fed
