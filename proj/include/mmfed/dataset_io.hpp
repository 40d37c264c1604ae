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

// Sample files ("FMS1") and dataset directories.
//
// FMS1 layout, little-endian:
//   "FMS1" | u64 height | u64 width | 4 x (H*W f64) modality planes
//   | H*W i32 label plane

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "mmfed/binary.hpp"
#include "mmfed/nifti.hpp"
#include "mmfed/regions.hpp"
#include "mmfed/sample.hpp"

namespace mmfed::data {

inline constexpr char kSampleMagic[] = "FMS1";

inline io::Bytes encode_sample(const MultiModalSample& s) {
  s.validate();
  if (s.images.size() != kNumModalities) {
    throw std::invalid_argument("FMS1 stores exactly " + std::to_string(kNumModalities) + " modalities");
  }
  io::Bytes b;
  b.reserve(4 + 16 + s.pixels() * (8 * kNumModalities + 4));
  io::put_bytes(b, {kSampleMagic, 4});
  io::put_u64(b, s.height);
  io::put_u64(b, s.width);
  for (const auto& img : s.images)
    for (double v : img) io::put_f64(b, v);
  for (int l : s.labels) io::put_i32(b, l);
  return b;
}

inline MultiModalSample decode_sample(const io::Bytes& bytes) {
  io::Reader r(bytes);
  if (r.str(4, "magic") != std::string(kSampleMagic, 4)) throw FormatError("magic is not 'FMS1'");
  MultiModalSample s;
  s.height = r.u64("height");
  s.width = r.u64("width");
  if (s.height == 0 || s.width == 0 || s.height > (1u << 16) || s.width > (1u << 16)) {
    throw FormatError("height/width " + std::to_string(s.height) + "x" + std::to_string(s.width) + " out of range");
  }
  const std::size_t n = s.pixels();
  if (r.remaining() != n * (8 * kNumModalities + 4)) {
    throw FormatError("payload size " + std::to_string(r.remaining()) + " does not match " +
                      std::to_string(s.height) + "x" + std::to_string(s.width) + " planes");
  }
  s.images.assign(kNumModalities, std::vector<double>(n));
  for (std::size_t m = 0; m < kNumModalities; ++m)
    for (std::size_t i = 0; i < n; ++i) s.images[m][i] = r.f64("modality plane");
  s.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.labels[i] = r.i32("label plane");
    if (!is_brats_label(s.labels[i])) {
      throw FormatError("label plane value " + std::to_string(s.labels[i]) + " at pixel " + std::to_string(i) +
                        " is not one of {0, 1, 2, 4}");
    }
  }
  return s;
}

inline void write_sample(const std::string& path, const MultiModalSample& s) { io::write_file(path, encode_sample(s)); }

inline MultiModalSample read_sample(const std::string& path) {
  try {
    return decode_sample(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

inline std::string sample_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%05zu.fms", i);
  return buf;
}

/// Writes sample_00000.fms, sample_00001.fms, ... into `dir`.
inline void write_sample_dir(const std::string& dir, const std::vector<MultiModalSample>& samples) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    write_sample((std::filesystem::path(dir) / sample_file_name(i)).string(), samples[i]);
  }
}

/// Every *.fms file in `dir`, in file-name order.
inline std::vector<MultiModalSample> read_sample_dir(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".fms") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<MultiModalSample> out;
  for (const auto& f : files) out.push_back(read_sample(f.string()));
  return out;
}

namespace detail {

inline std::vector<double> resize_nearest(const std::vector<double>& img, std::size_t h, std::size_t w,
                                          std::size_t out) {
  std::vector<double> r(out * out);
  for (std::size_t y = 0; y < out; ++y) {
    const std::size_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * out));
    for (std::size_t x = 0; x < out; ++x) {
      const std::size_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * out));
      r[y * out + x] = img[sy * w + sx];
    }
  }
  return r;
}

inline std::filesystem::path find_modality(const std::filesystem::path& dir, const std::string& key) {
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    for (const std::string ext : {".nii.gz", ".nii"}) {
      if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0) {
        const std::string stem = name.substr(0, name.size() - ext.size());
        if (stem.size() >= key.size() + 1 && stem.compare(stem.size() - key.size(), key.size(), key) == 0 &&
            (stem[stem.size() - key.size() - 1] == '_' || stem[stem.size() - key.size() - 1] == '-')) {
          return e.path();
        }
      }
    }
  }
  throw std::runtime_error("case '" + dir.string() + "' has no *_" + key + ".nii[.gz] file");
}

}  // namespace detail

/// BraTS-style case directories (one subdirectory per patient holding
/// *_t1, *_t1ce, *_t2, *_flair and *_seg volumes). Each case contributes the
/// axial slice with the largest whole-tumor area, min-max normalized per
/// modality and resampled to size x size by nearest neighbour.
inline std::vector<MultiModalSample> load_nifti_cases(const std::string& root, std::size_t size) {
  std::vector<std::filesystem::path> cases;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) cases.push_back(e.path());
  std::sort(cases.begin(), cases.end());
  std::vector<MultiModalSample> out;
  for (const auto& dir : cases) {
    const NiftiVolume seg = read_nifti(detail::find_modality(dir, "seg").string());
    const std::size_t nx = seg.dim[0], ny = seg.dim[1], nz = seg.dim[2];
    std::size_t best = 0, best_area = 0;
    for (std::size_t z = 0; z < nz; ++z) {
      std::size_t area = 0;
      for (std::size_t i = 0; i < nx * ny; ++i) area += seg.data[z * nx * ny + i] != 0.0;
      if (area > best_area) best_area = area, best = z;
    }
    if (best_area == 0) best = nz / 2;
    MultiModalSample s;
    s.height = s.width = size;
    for (const char* key : {"t1", "t1ce", "t2", "flair"}) {
      const NiftiVolume vol = read_nifti(detail::find_modality(dir, key).string());
      if (vol.dim != seg.dim) throw FormatError("'" + dir.string() + "': " + key + " dims differ from seg");
      std::vector<double> img = vol.axial_slice(best);
      const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
      const double a = *lo, range = *hi - *lo;
      for (double& v : img) v = range > 0.0 ? (v - a) / range : 0.0;
      s.images.push_back(detail::resize_nearest(img, ny, nx, size));
    }
    const std::vector<double> lab = detail::resize_nearest(seg.axial_slice(best), ny, nx, size);
    for (double v : lab) {
      const int l = static_cast<int>(std::lround(v));
      if (!is_brats_label(l)) throw FormatError("'" + dir.string() + "': seg value " + std::to_string(l) + " not in {0, 1, 2, 4}");
      s.labels.push_back(l);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mmfed::data
