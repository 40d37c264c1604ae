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

// Synthetic brain-tumor phantoms. Each sample is a brain ellipse holding a
// tumor of three nested ellipses (edema, necrotic core, enhancing center).
// Every modality sees a different part of the geometry:
//
//   FLAIR  bright over the whole tumor, and over a "lesion" blob elsewhere
//   T2     bright over the whole tumor, and over a "fluid" blob elsewhere
//   T1c    bright over the enhancing center
//   T1     dark over the tumor core
//
// The whole tumor is exactly where FLAIR and T2 are both bright, so a model
// that only sees one of them cannot separate the tumor from its distractor.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "mmfed/rng.hpp"
#include "mmfed/sample.hpp"

namespace mmfed::data {

struct SyntheticConfig {
  std::size_t size = 64;
  double noise_std = 0.05;
};

namespace detail {

struct Ellipse {
  double cy = 0, cx = 0, ry = 1, rx = 1, angle = 0;

  bool contains(double y, double x) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dy = y - cy, dx = x - cx;
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

// Axis-aligned bounding radius.
inline double reach(const Ellipse& e) { return std::max(e.rx, e.ry); }

}  // namespace detail

/// One phantom from its own random stream.
inline MultiModalSample generate_synthetic_sample(const SyntheticConfig& cfg, Rng& rng) {
  const double n = static_cast<double>(cfg.size);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  using detail::Ellipse;

  const double mid = (n - 1.0) / 2.0;
  Ellipse brain{mid + uni(-0.02, 0.02) * n, mid + uni(-0.02, 0.02) * n, uni(0.40, 0.46) * n, uni(0.36, 0.43) * n,
                uni(-0.2, 0.2)};

  // Center of a blob of radius r that stays inside the brain.
  auto place = [&](double r) {
    const double t = uni(0.0, 2.0 * std::numbers::pi);
    const double rho = std::sqrt(u(rng));
    const double sy = std::max(0.0, brain.ry - r - 1.0), sx = std::max(0.0, brain.rx - r - 1.0);
    return std::pair{brain.cy + rho * sy * std::sin(t), brain.cx + rho * sx * std::cos(t)};
  };

  Ellipse wt;
  wt.ry = uni(0.10, 0.22) * n;
  wt.rx = uni(0.10, 0.22) * n;
  wt.angle = uni(0.0, std::numbers::pi);
  std::tie(wt.cy, wt.cx) = place(detail::reach(wt));

  Ellipse tc{0, 0, wt.ry * uni(0.45, 0.7), wt.rx * uni(0.45, 0.7), wt.angle + uni(-0.4, 0.4)};
  {
    const double slack = std::min(wt.ry, wt.rx) - detail::reach(tc);
    const double off = std::max(0.0, slack) * 0.5;
    tc.cy = wt.cy + uni(-off, off);
    tc.cx = wt.cx + uni(-off, off);
  }
  Ellipse et{0, 0, tc.ry * uni(0.4, 0.65), tc.rx * uni(0.4, 0.65), tc.angle + uni(-0.4, 0.4)};
  {
    const double slack = std::min(tc.ry, tc.rx) - detail::reach(et);
    const double off = std::max(0.0, slack) * 0.5;
    et.cy = tc.cy + uni(-off, off);
    et.cx = tc.cx + uni(-off, off);
  }

  // Distractors of tumor-like size placed away from the tumor.
  auto distractor = [&]() {
    Ellipse d;
    d.ry = uni(0.08, 0.18) * n;
    d.rx = uni(0.08, 0.18) * n;
    d.angle = uni(0.0, std::numbers::pi);
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::tie(d.cy, d.cx) = place(detail::reach(d));
      if (std::hypot(d.cy - wt.cy, d.cx - wt.cx) > detail::reach(d) + detail::reach(wt) + 1.0) break;
    }
    return d;
  };
  const Ellipse lesion = distractor();
  const Ellipse fluid = distractor();

  const double base_t1 = uni(0.40, 0.50), base_t1c = uni(0.30, 0.40), base_t2 = uni(0.25, 0.35),
               base_fl = uni(0.25, 0.35);
  const double tumor_fl = uni(0.75, 0.85), tumor_t2 = uni(0.75, 0.85);
  const double shading = uni(-0.05, 0.05);

  MultiModalSample s;
  s.height = s.width = cfg.size;
  s.images.assign(kNumModalities, std::vector<double>(s.pixels(), 0.0));
  s.labels.assign(s.pixels(), kBackground);
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0.0 ? cfg.noise_std : 1.0);
  for (std::size_t y = 0; y < cfg.size; ++y) {
    for (std::size_t x = 0; x < cfg.size; ++x) {
      const std::size_t i = y * cfg.size + x;
      const double py = static_cast<double>(y), px = static_cast<double>(x);
      double t1 = 0, t1c = 0, t2 = 0, fl = 0;
      if (brain.contains(py, px)) {
        const double grad = shading * (py - mid) / n;
        t1 = base_t1 + grad;
        t1c = base_t1c + grad;
        t2 = base_t2 + grad;
        fl = base_fl + grad;
        const bool in_wt = wt.contains(py, px);
        const bool in_tc = in_wt && tc.contains(py, px);
        const bool in_et = in_tc && et.contains(py, px);
        if (lesion.contains(py, px) && !in_wt) fl = tumor_fl;
        if (fluid.contains(py, px) && !in_wt) t2 = tumor_t2 + 0.05;
        if (in_wt) {
          fl = tumor_fl;
          t2 = tumor_t2;
          s.labels[i] = kEdema;
        }
        if (in_tc) {
          t1 = 0.15;
          s.labels[i] = kNecrotic;
        }
        if (in_et) {
          t1c = 0.9;
          s.labels[i] = kEnhancing;
        }
      }
      const double vals[kNumModalities] = {t1, t1c, t2, fl};
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        s.images[m][i] = std::clamp(vals[m] + (cfg.noise_std > 0.0 ? noise(rng) : 0.0), 0.0, 1.0);
      }
    }
  }
  return s;
}

/// `count` phantoms; sample i depends only on (seed, i).
inline std::vector<MultiModalSample> generate_synthetic_dataset(std::size_t count, const SyntheticConfig& cfg,
                                                                std::uint64_t seed) {
  if (cfg.size < 8) throw std::invalid_argument("synthetic image size must be >= 8");
  if (!(cfg.noise_std >= 0.0)) throw std::invalid_argument("synthetic noise_std must be >= 0");
  std::vector<MultiModalSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, "data", i);
    out.push_back(generate_synthetic_sample(cfg, rng));
  }
  return out;
}

}  // namespace mmfed::data
