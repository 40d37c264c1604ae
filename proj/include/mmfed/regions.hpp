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

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfed/sample.hpp"

namespace mmfed::data {

using Mask = std::vector<std::uint8_t>;

enum class Region : std::size_t { kET = 0, kTC = 1, kWT = 2 };
inline constexpr std::array<Region, 3> kRegions{Region::kET, Region::kTC, Region::kWT};

inline const char* region_name(Region r) {
  switch (r) {
    case Region::kET: return "ET";
    case Region::kTC: return "TC";
    case Region::kWT: return "WT";
  }
  return "?";
}

/// Nested tumor sub-region masks; et is a subset of tc, tc a subset of wt.
struct RegionMasks {
  Mask et, tc, wt;

  const Mask& operator[](Region r) const {
    return r == Region::kET ? et : (r == Region::kTC ? tc : wt);
  }
};

inline bool is_brats_label(int v) {
  return v == kBackground || v == kNecrotic || v == kEdema || v == kEnhancing;
}

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}.
inline RegionMasks labelmap_to_regions(std::span<const int> labels) {
  RegionMasks r{Mask(labels.size(), 0), Mask(labels.size(), 0), Mask(labels.size(), 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int v = labels[i];
    if (!is_brats_label(v)) {
      throw std::invalid_argument("label map value " + std::to_string(v) + " at pixel " + std::to_string(i) +
                                  " is not one of {0, 1, 2, 4}");
    }
    r.et[i] = v == kEnhancing;
    r.tc[i] = v == kEnhancing || v == kNecrotic;
    r.wt[i] = v != kBackground;
  }
  return r;
}

/// Class index used by 4-class models: {0, 1, 2, 4} -> {0, 1, 2, 3}.
inline std::size_t label_to_class(int v) {
  switch (v) {
    case kBackground: return 0;
    case kNecrotic: return 1;
    case kEdema: return 2;
    case kEnhancing: return 3;
    default: throw std::invalid_argument("label value " + std::to_string(v) + " is not one of {0, 1, 2, 4}");
  }
}

inline int class_to_label(std::size_t c) {
  static constexpr std::array<int, 4> kCodes{kBackground, kNecrotic, kEdema, kEnhancing};
  return kCodes.at(c);
}

}  // namespace mmfed::data
