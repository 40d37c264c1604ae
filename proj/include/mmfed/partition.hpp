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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfed/rng.hpp"

namespace mmfed::data {

struct PartitionPlan {
  std::vector<double> weights;
  std::vector<std::vector<std::size_t>> assignments;
  double alpha = 0.0;
  std::uint64_t seed = 0;

  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c;
    for (const auto& a : assignments) c.push_back(a.size());
    return c;
  }

  /// Weights on the simplex; assignments disjoint and covering 0..n-1.
  void validate(std::size_t n_samples) const {
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::logic_error("partition weight is negative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::logic_error("partition weights do not sum to 1");
    std::vector<char> seen(n_samples, 0);
    std::size_t total = 0;
    for (const auto& a : assignments) {
      for (std::size_t i : a) {
        if (i >= n_samples || seen[i]) throw std::logic_error("partition assignments overlap or exceed range");
        seen[i] = 1;
        ++total;
      }
    }
    if (total != n_samples) throw std::logic_error("partition assignments do not cover the dataset");
  }
};

/// A point on the simplex drawn from Dir(alpha, ..., alpha).
inline std::vector<double> dirichlet_sample(std::size_t n, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> w(n);
  double s = 0.0;
  for (double& v : w) s += (v = gamma(rng));
  if (!(s > 0.0)) {
    // Every gamma draw underflowed (only for tiny alpha): all mass on one
    // uniformly chosen coordinate, the limit of Dir(alpha) as alpha -> 0.
    std::fill(w.begin(), w.end(), 0.0);
    w[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = 1.0;
    return w;
  }
  for (double& v : w) v /= s;
  return w;
}

/// Integer counts summing to `n` with every entry >= 1: one sample per
/// client, the remaining n - N by largest remainder of w * (n - N). Ties go
/// to the lower client index.
inline std::vector<std::size_t> largest_remainder_counts(const std::vector<double>& w, std::size_t n) {
  const std::size_t k = w.size();
  if (n < k) throw std::invalid_argument("cannot give each of " + std::to_string(k) + " clients a sample from " +
                                         std::to_string(n));
  const std::size_t spare = n - k;
  std::vector<std::size_t> counts(k, 1);
  std::vector<double> frac(k);
  std::size_t used = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = w[i] * static_cast<double>(spare);
    const double fl = std::floor(exact);
    counts[i] += static_cast<std::size_t>(fl);
    used += static_cast<std::size_t>(fl);
    frac[i] = exact - fl;
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  // Floating error can leave `used` one off from the exact floor sum.
  for (std::size_t j = 0; used < spare; ++j, ++used) ++counts[order[j % k]];
  for (auto it = order.rbegin(); used > spare && it != order.rend(); ++it) {
    if (counts[*it] > 1) {
      --counts[*it];
      --used;
    }
  }
  return counts;
}

inline PartitionPlan dirichlet_partition(std::size_t n_samples, std::size_t n_clients, double alpha, Rng& rng) {
  if (n_clients < 1) throw std::invalid_argument("dirichlet_partition: n_clients must be >= 1");
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
  if (n_samples < n_clients) {
    throw std::invalid_argument("dirichlet_partition: n_samples (" + std::to_string(n_samples) +
                                ") < n_clients (" + std::to_string(n_clients) + ") leaves a client empty");
  }
  PartitionPlan plan;
  plan.alpha = alpha;
  plan.weights = dirichlet_sample(n_clients, alpha, rng);
  const auto counts = largest_remainder_counts(plan.weights, n_samples);
  std::vector<std::size_t> perm(n_samples);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::size_t at = 0;
  for (std::size_t c : counts) {
    plan.assignments.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                                  perm.begin() + static_cast<std::ptrdiff_t>(at + c));
    at += c;
  }
  return plan;
}

inline PartitionPlan dirichlet_partition(std::size_t n_samples, std::size_t n_clients, double alpha,
                                         std::uint64_t seed) {
  Rng rng = make_rng(seed, "partition");
  PartitionPlan plan = dirichlet_partition(n_samples, n_clients, alpha, rng);
  plan.seed = seed;
  return plan;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Shuffled train/val/test split. Sizes are round(n * ratio) for train and
/// val; test takes the rest.
inline Split split_dataset(std::size_t n, double train, double val, double test, Rng& rng) {
  if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must be nonnegative and sum to 1");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto nt = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train));
  const auto nv = std::min(n - nt, static_cast<std::size_t>(std::llround(static_cast<double>(n) * val)));
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(nt));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(nt), perm.begin() + static_cast<std::ptrdiff_t>(nt + nv));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(nt + nv), perm.end());
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

}  // namespace mmfed::data
