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

// Segmentation metrics per tumor region: Dice, Jaccard, Hausdorff distance,
// sensitivity, precision and specificity, summarized as mean and population
// standard deviation over samples.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfed/errors.hpp"
#include "mmfed/regions.hpp"
#include "mmfed/tensor.hpp"
#include "nlohmann/json.hpp"

namespace mmfed::metrics {

using data::Mask;
using data::Region;

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion_counts: pred has " + std::to_string(pred.size()) + " pixels, gt has " +
                     std::to_string(gt.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

struct OverlapMetrics {
  double dice = 0, jaccard = 0, sensitivity = 0, precision = 0, specificity = 0;
};

/// Both masks empty: dice, jaccard, sensitivity and precision are 1. A ratio
/// whose denominator vanishes because exactly one mask is empty is 0.
/// Specificity with no ground-truth negatives is 1.
inline OverlapMetrics overlap_metrics(const ConfusionCounts& c) {
  auto ratio = [](double num, double den, double empty) { return den > 0 ? num / den : empty; };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn),
               tn = static_cast<double>(c.tn);
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  const double e = both_empty ? 1.0 : 0.0;
  OverlapMetrics m;
  m.dice = ratio(2 * tp, 2 * tp + fp + fn, e);
  m.jaccard = ratio(tp, tp + fp + fn, e);
  m.sensitivity = ratio(tp, tp + fn, e);
  m.precision = ratio(tp, tp + fp, e);
  m.specificity = ratio(tn, tn + fp, 1.0);
  return m;
}

struct Spacing {
  double dy = 1.0, dx = 1.0;
};

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background.
inline Mask boundary(std::span<const std::uint8_t> m, std::size_t h, std::size_t w) {
  if (m.size() != h * w) throw ShapeError("boundary: mask size does not match " + std::to_string(h) + "x" + std::to_string(w));
  Mask b(m.size(), 0);
  auto fg = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    return y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(h) && x < static_cast<std::ptrdiff_t>(w) &&
           m[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] != 0;
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      const auto iy = static_cast<std::ptrdiff_t>(y), ix = static_cast<std::ptrdiff_t>(x);
      b[y * w + x] = !fg(iy - 1, ix) || !fg(iy + 1, ix) || !fg(iy, ix - 1) || !fg(iy, ix + 1);
    }
  }
  return b;
}

namespace detail {

inline bool any(std::span<const std::uint8_t> m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}

inline double sq_dist(std::ptrdiff_t dy, std::ptrdiff_t dx, const Spacing& s) {
  const double fy = static_cast<double>(dy * dy), fx = static_cast<double>(dx * dx);
  return fy * (s.dy * s.dy) + fx * (s.dx * s.dx);
}

// One-dimensional squared distance transform of sampled function f with
// weight w2 per unit step: lower envelope of the parabolas rooted at the
// finite samples.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& out, double w2, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  auto cross = [&](std::size_t q, std::size_t p) {
    const double qd = static_cast<double>(q), pd = static_cast<double>(p);
    return ((f[q] + w2 * qd * qd) - (f[p] + w2 * pd * pd)) / (2.0 * w2 * (qd - pd));
  };
  std::size_t k = 0;
  bool started = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (!(f[q] < inf)) continue;
    if (!started) {
      started = true;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = cross(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = cross(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!started) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const auto d = static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(v[k]);
    out[q] = f[v[k]] + static_cast<double>(d * d) * w2;
  }
}

}  // namespace detail

/// Squared Euclidean distance from every pixel to the nearest set pixel of
/// `m` (infinity when `m` is empty). Separable exact transform.
inline std::vector<double> squared_distance_transform(std::span<const std::uint8_t> m, std::size_t h, std::size_t w,
                                                      Spacing sp = {}) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> col(h * w);
  {
    std::vector<double> f(h), out(h), z(h + 1);
    std::vector<std::size_t> v(h);
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t y = 0; y < h; ++y) f[y] = m[y * w + x] ? 0.0 : inf;
      detail::edt_1d(f, out, sp.dy * sp.dy, v, z);
      for (std::size_t y = 0; y < h; ++y) col[y * w + x] = out[y];
    }
  }
  std::vector<double> res(h * w);
  std::vector<double> f(w), out(w), z(w + 1);
  std::vector<std::size_t> v(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = col[y * w + x];
    detail::edt_1d(f, out, sp.dx * sp.dx, v, z);
    for (std::size_t x = 0; x < w; ++x) res[y * w + x] = out[x];
  }
  return res;
}

/// Symmetric Hausdorff distance between the boundaries of two masks by
/// exhaustive pair search. nullopt when exactly one mask is empty; 0 when
/// both are.
inline std::optional<double> hausdorff_brute_force(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                                                   std::size_t h, std::size_t w, Spacing sp = {}) {
  if (a.size() != b.size()) throw ShapeError("hausdorff: mask sizes differ");
  const bool ea = !detail::any(a), eb = !detail::any(b);
  if (ea && eb) return 0.0;
  if (ea || eb) return std::nullopt;
  const Mask ba = boundary(a, h, w), bb = boundary(b, h, w);
  std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> pa, pb;
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto y = static_cast<std::ptrdiff_t>(i / w), x = static_cast<std::ptrdiff_t>(i % w);
    if (ba[i]) pa.emplace_back(y, x);
    if (bb[i]) pb.emplace_back(y, x);
  }
  auto directed = [&](const auto& from, const auto& to) {
    double worst = 0.0;
    for (const auto& [y, x] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [v, u] : to) best = std::min(best, detail::sq_dist(y - v, x - u, sp));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(std::max(directed(pa, pb), directed(pb, pa)));
}

/// Same result via distance transforms of each boundary.
inline std::optional<double> hausdorff_distance(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                                                std::size_t h, std::size_t w, Spacing sp = {}) {
  if (a.size() != b.size()) throw ShapeError("hausdorff: mask sizes differ");
  if (a.size() != h * w) throw ShapeError("hausdorff: mask size does not match image size");
  if (!(sp.dy > 0 && sp.dx > 0)) throw std::invalid_argument("hausdorff: pixel spacing must be positive");
  const bool ea = !detail::any(a), eb = !detail::any(b);
  if (ea && eb) return 0.0;
  if (ea || eb) return std::nullopt;
  const Mask ba = boundary(a, h, w), bb = boundary(b, h, w);
  const auto da = squared_distance_transform(ba, h, w, sp);
  const auto db = squared_distance_transform(bb, h, w, sp);
  double worst = 0.0;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (ba[i]) worst = std::max(worst, db[i]);
    if (bb[i]) worst = std::max(worst, da[i]);
  }
  return std::sqrt(worst);
}

enum Metric : std::size_t { kDice = 0, kJaccard, kHausdorff, kSensitivity, kPrecision, kSpecificity };
inline constexpr std::size_t kNumMetrics = 6;
inline constexpr std::array<const char*, kNumMetrics> kMetricNames{"dice",        "jaccard",   "hausdorff",
                                                                   "sensitivity", "precision", "specificity"};

/// Six values per region; hausdorff is nullopt when undefined.
struct RegionValues {
  OverlapMetrics overlap;
  std::optional<double> hausdorff;

  std::optional<double> get(Metric m) const {
    switch (m) {
      case kDice: return overlap.dice;
      case kJaccard: return overlap.jaccard;
      case kHausdorff: return hausdorff;
      case kSensitivity: return overlap.sensitivity;
      case kPrecision: return overlap.precision;
      case kSpecificity: return overlap.specificity;
    }
    return std::nullopt;
  }
};

using SampleMetrics = std::array<RegionValues, 3>;  // indexed by Region

inline RegionValues region_values(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                                  std::size_t h, std::size_t w, Spacing sp = {}) {
  return {overlap_metrics(confusion_counts(pred, gt)), hausdorff_distance(pred, gt, h, w, sp)};
}

inline SampleMetrics evaluate_regions(const data::RegionMasks& pred, const data::RegionMasks& gt, std::size_t h,
                                      std::size_t w, Spacing sp = {}) {
  SampleMetrics out;
  for (Region r : data::kRegions) out[static_cast<std::size_t>(r)] = region_values(pred[r], gt[r], h, w, sp);
  return out;
}

/// Predicted region masks from class probabilities [classes, H, W]. Two
/// classes: channel 1 >= threshold is whole tumor, ET and TC are empty.
/// Four classes: per-pixel argmax mapped back to label codes.
inline data::RegionMasks predicted_regions(const Tensor& probs, double threshold = 0.5) {
  if (probs.rank() != 3 || (probs.dim(0) != 2 && probs.dim(0) != 4)) {
    throw ShapeError("predicted_regions: expected [2|4, H, W] probabilities, got " + shape_str(probs.shape()));
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must be in (0, 1)");
  const std::size_t n = probs.dim(1) * probs.dim(2);
  if (probs.dim(0) == 2) {
    data::RegionMasks r{Mask(n, 0), Mask(n, 0), Mask(n, 0)};
    for (std::size_t i = 0; i < n; ++i) r.wt[i] = probs[n + i] >= threshold;
    return r;
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 4; ++c)
      if (probs[c * n + i] > probs[best * n + i]) best = c;
    labels[i] = data::class_to_label(best);
  }
  return data::labelmap_to_regions(labels);
}

inline SampleMetrics evaluate(const Tensor& probs, std::span<const int> labels, double threshold = 0.5,
                              Spacing sp = {}) {
  const std::size_t h = probs.dim(1), w = probs.dim(2);
  if (labels.size() != h * w) throw ShapeError("evaluate: label map size does not match prediction");
  return evaluate_regions(predicted_regions(probs, threshold), data::labelmap_to_regions(labels), h, w, sp);
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
  std::size_t excluded = 0;  // undefined values left out
};

struct MetricReport {
  std::array<std::array<Summary, kNumMetrics>, 3> cells;  // [region][metric]

  const Summary& at(Region r, Metric m) const { return cells[static_cast<std::size_t>(r)][m]; }
};

inline MetricReport summarize(const std::vector<SampleMetrics>& samples) {
  if (samples.empty()) throw std::invalid_argument("summarize: no samples");
  MetricReport rep;
  for (Region r : data::kRegions) {
    for (std::size_t m = 0; m < kNumMetrics; ++m) {
      Summary& s = rep.cells[static_cast<std::size_t>(r)][m];
      double sum = 0.0;
      for (const auto& sm : samples) {
        const auto v = sm[static_cast<std::size_t>(r)].get(static_cast<Metric>(m));
        if (!v) {
          ++s.excluded;
          continue;
        }
        sum += *v;
        ++s.count;
      }
      if (s.count == 0) {
        s.mean = s.std = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      s.mean = sum / static_cast<double>(s.count);
      double var = 0.0;
      for (const auto& sm : samples) {
        const auto v = sm[static_cast<std::size_t>(r)].get(static_cast<Metric>(m));
        if (v) var += (*v - s.mean) * (*v - s.mean);
      }
      s.std = std::sqrt(var / static_cast<double>(s.count));
    }
  }
  return rep;
}

namespace detail {
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
}  // namespace detail

/// One row per (region, metric); std is the population standard deviation.
inline std::string report_csv(const MetricReport& rep) {
  std::ostringstream os;
  os << "region,metric,mean,std_population,count,excluded\n";
  for (Region r : data::kRegions) {
    for (std::size_t m = 0; m < kNumMetrics; ++m) {
      const Summary& s = rep.at(r, static_cast<Metric>(m));
      os << data::region_name(r) << ',' << kMetricNames[m] << ',' << detail::fmt(s.mean) << ','
         << detail::fmt(s.std) << ',' << s.count << ',' << s.excluded << '\n';
    }
  }
  return os.str();
}

inline nlohmann::ordered_json report_json(const MetricReport& rep) {
  nlohmann::ordered_json j;
  j["std_kind"] = "population";
  for (Region r : data::kRegions) {
    nlohmann::ordered_json region;
    for (std::size_t m = 0; m < kNumMetrics; ++m) {
      const Summary& s = rep.at(r, static_cast<Metric>(m));
      nlohmann::ordered_json cell;
      cell["mean"] = std::isnan(s.mean) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(s.mean);
      cell["std"] = std::isnan(s.std) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(s.std);
      cell["count"] = s.count;
      cell["excluded"] = s.excluded;
      region[kMetricNames[m]] = cell;
    }
    j["regions"][data::region_name(r)] = region;
  }
  return j;
}

}  // namespace mmfed::metrics
