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

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmfed::data {

/// Modality order inside a sample.
enum Modality : std::size_t { kT1 = 0, kT1c = 1, kT2 = 2, kFlair = 3 };
inline constexpr std::size_t kNumModalities = 4;

/// BraTS label codes.
inline constexpr int kBackground = 0;
inline constexpr int kNecrotic = 1;
inline constexpr int kEdema = 2;
inline constexpr int kEnhancing = 4;

/// Aligned single-channel modality images plus a label map, all H x W,
/// row-major. Intensities are normalized to [0, 1].
struct MultiModalSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::vector<double>> images;
  std::vector<int> labels;

  std::size_t pixels() const { return height * width; }

  void validate() const {
    if (images.empty()) throw std::invalid_argument("sample has no modality images");
    for (std::size_t m = 0; m < images.size(); ++m) {
      if (images[m].size() != pixels()) {
        throw std::invalid_argument("modality " + std::to_string(m) + " has " +
                                    std::to_string(images[m].size()) + " pixels, expected " +
                                    std::to_string(pixels()));
      }
    }
    if (labels.size() != pixels()) throw std::invalid_argument("label map size does not match images");
  }

  friend bool operator==(const MultiModalSample&, const MultiModalSample&) = default;
};

/// Copy of `s` where every modality not in `keep` is zeroed.
inline MultiModalSample ablate_modalities(const MultiModalSample& s, const std::vector<std::size_t>& keep) {
  MultiModalSample out = s;
  for (std::size_t m = 0; m < out.images.size(); ++m) {
    bool kept = false;
    for (std::size_t k : keep) kept = kept || k == m;
    if (!kept) std::fill(out.images[m].begin(), out.images[m].end(), 0.0);
  }
  return out;
}

}  // namespace mmfed::data
