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

// Single-file NIfTI-1 volumes (.nii, .nii.gz), read-only in production; the
// writer exists to produce test fixtures.

#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mmfed/binary.hpp"
#include "mmfed/errors.hpp"

namespace mmfed::data {

enum NiftiType : std::int16_t {
  kNiftiUint8 = 2,
  kNiftiInt16 = 4,
  kNiftiInt32 = 8,
  kNiftiFloat32 = 16,
  kNiftiFloat64 = 64,
};

inline constexpr std::size_t kNiftiHeaderSize = 348;

struct NiftiVolume {
  std::array<std::size_t, 3> dim{0, 0, 0};  // nx, ny, nz
  std::array<double, 3> pixdim{1.0, 1.0, 1.0};
  std::int16_t datatype = kNiftiFloat32;
  float vox_offset = 352.0f;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  bool big_endian = false;
  std::vector<double> data;  // x fastest, then y, then z

  std::size_t voxels() const { return dim[0] * dim[1] * dim[2]; }
  double at(std::size_t x, std::size_t y, std::size_t z) const { return data[(z * dim[1] + y) * dim[0] + x]; }

  /// Axial slice z as an ny x nx row-major image.
  std::vector<double> axial_slice(std::size_t z) const {
    if (z >= dim[2]) throw std::out_of_range("axial slice " + std::to_string(z) + " out of range");
    const std::size_t n = dim[0] * dim[1];
    return std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(z * n),
                               data.begin() + static_cast<std::ptrdiff_t>((z + 1) * n));
  }
};

namespace detail {

inline std::size_t nifti_type_size(std::int16_t t) {
  switch (t) {
    case kNiftiUint8: return 1;
    case kNiftiInt16: return 2;
    case kNiftiInt32: return 4;
    case kNiftiFloat32: return 4;
    case kNiftiFloat64: return 8;
    default: return 0;
  }
}

class EndianReader {
 public:
  EndianReader(const io::Bytes& b, bool big) : b_(b), big_(big) {}

  template <class U>
  U raw(std::size_t off) const {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const std::size_t k = big_ ? sizeof(U) - 1 - i : i;
      v |= static_cast<U>(static_cast<U>(b_[off + k]) << (8 * i));
    }
    return v;
  }
  std::int16_t i16(std::size_t off) const { return static_cast<std::int16_t>(raw<std::uint16_t>(off)); }
  std::int32_t i32(std::size_t off) const { return static_cast<std::int32_t>(raw<std::uint32_t>(off)); }
  float f32(std::size_t off) const { return std::bit_cast<float>(raw<std::uint32_t>(off)); }
  double f64(std::size_t off) const { return std::bit_cast<double>(raw<std::uint64_t>(off)); }

 private:
  const io::Bytes& b_;
  bool big_;
};

template <class U>
void put_endian(io::Bytes& out, std::size_t off, U v, bool big) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const std::size_t k = big ? sizeof(U) - 1 - i : i;
    out[off + k] = static_cast<std::uint8_t>(v >> (8 * i));
  }
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

/// Reads a plain or gzip-compressed file fully.
inline io::Bytes read_maybe_gzip(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
  io::Bytes out;
  std::array<std::uint8_t, 1 << 16> buf;
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      int err = 0;
      std::string msg = gzerror(f, &err);
      gzclose(f);
      throw FormatError("gzip stream of '" + path + "' is corrupt: " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

/// Parses an in-memory NIfTI-1 single-file image.
inline NiftiVolume parse_nifti(const io::Bytes& b) {
  if (b.size() < kNiftiHeaderSize) {
    throw FormatError("header truncated: sizeof_hdr needs 348 bytes, file has " + std::to_string(b.size()));
  }
  bool big = false;
  if (detail::EndianReader(b, false).i32(0) != static_cast<std::int32_t>(kNiftiHeaderSize)) {
    if (detail::EndianReader(b, true).i32(0) != static_cast<std::int32_t>(kNiftiHeaderSize)) {
      throw FormatError("sizeof_hdr is not 348 in either byte order");
    }
    big = true;
  }
  const detail::EndianReader r(b, big);

  const char* magic = reinterpret_cast<const char*>(b.data() + 344);
  if (std::memcmp(magic, "n+1\0", 4) != 0) {
    if (std::memcmp(magic, "ni1\0", 4) == 0) {
      throw FormatError("magic 'ni1' denotes a paired .hdr/.img image; only single-file 'n+1' is supported");
    }
    throw FormatError("magic is not 'n+1'");
  }

  NiftiVolume v;
  v.big_endian = big;
  const std::int16_t ndim = r.i16(40);
  if (ndim < 1 || ndim > 7) throw FormatError("dim[0] = " + std::to_string(ndim) + " is outside 1..7");
  for (int i = 1; i <= ndim; ++i) {
    const std::int16_t d = r.i16(40 + 2 * static_cast<std::size_t>(i));
    if (d < 1) throw FormatError("dim[" + std::to_string(i) + "] = " + std::to_string(d) + " must be >= 1");
    if (i <= 3) {
      v.dim[static_cast<std::size_t>(i - 1)] = static_cast<std::size_t>(d);
    } else if (d != 1) {
      throw FormatError("dim[" + std::to_string(i) + "] = " + std::to_string(d) + ": only 3D volumes are supported");
    }
  }
  for (std::size_t i = static_cast<std::size_t>(ndim); i < 3; ++i) v.dim[i] = 1;

  v.datatype = r.i16(70);
  const std::size_t esize = detail::nifti_type_size(v.datatype);
  if (esize == 0) throw FormatError("datatype " + std::to_string(v.datatype) + " is not supported");
  const std::int16_t bitpix = r.i16(72);
  if (static_cast<std::size_t>(bitpix) != 8 * esize) {
    throw FormatError("bitpix " + std::to_string(bitpix) + " does not match datatype " + std::to_string(v.datatype));
  }
  for (std::size_t i = 0; i < 3; ++i) v.pixdim[i] = r.f32(80 + 4 * i);
  v.vox_offset = r.f32(108);
  v.scl_slope = r.f32(112);
  v.scl_inter = r.f32(116);
  if (!(v.vox_offset >= 352.0f) || !std::isfinite(v.vox_offset)) {
    throw FormatError("vox_offset " + std::to_string(v.vox_offset) + " is below 352");
  }

  const auto offset = static_cast<std::size_t>(v.vox_offset);
  const std::size_t count = v.voxels();
  if (offset > b.size() || (b.size() - offset) / esize < count) {
    throw FormatError("voxel data truncated: need " + std::to_string(count * esize) + " bytes at offset " +
                      std::to_string(offset) + ", file has " + std::to_string(b.size()));
  }
  v.data.resize(count);
  const bool scale = v.scl_slope != 0.0f && std::isfinite(v.scl_slope);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = offset + i * esize;
    double x = 0.0;
    switch (v.datatype) {
      case kNiftiUint8: x = b[at]; break;
      case kNiftiInt16: x = r.i16(at); break;
      case kNiftiInt32: x = r.i32(at); break;
      case kNiftiFloat32: x = r.f32(at); break;
      case kNiftiFloat64: x = r.f64(at); break;
      default: break;
    }
    v.data[i] = scale ? static_cast<double>(v.scl_slope) * x + static_cast<double>(v.scl_inter) : x;
  }
  return v;
}

inline NiftiVolume read_nifti(const std::string& path) {
  try {
    return parse_nifti(read_maybe_gzip(path));
  } catch (const FormatError& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

/// Serializes `v` with its datatype, byte order and scaling fields. Values
/// are stored raw; integer types round to nearest.
inline io::Bytes encode_nifti(const NiftiVolume& v) {
  const std::size_t esize = detail::nifti_type_size(v.datatype);
  if (esize == 0) throw std::invalid_argument("cannot write datatype " + std::to_string(v.datatype));
  if (v.data.size() != v.voxels()) throw std::invalid_argument("volume data does not match its dimensions");
  const std::size_t offset = 352;
  io::Bytes b(offset + v.voxels() * esize, 0);
  const bool big = v.big_endian;
  detail::put_endian<std::uint32_t>(b, 0, kNiftiHeaderSize, big);
  detail::put_endian<std::uint16_t>(b, 40, 3, big);
  for (std::size_t i = 0; i < 3; ++i) detail::put_endian<std::uint16_t>(b, 42 + 2 * i, static_cast<std::uint16_t>(v.dim[i]), big);
  for (std::size_t i = 3; i < 7; ++i) detail::put_endian<std::uint16_t>(b, 42 + 2 * i, 1, big);
  detail::put_endian<std::uint16_t>(b, 70, static_cast<std::uint16_t>(v.datatype), big);
  detail::put_endian<std::uint16_t>(b, 72, static_cast<std::uint16_t>(8 * esize), big);
  detail::put_endian(b, 76, std::bit_cast<std::uint32_t>(1.0f), big);
  for (std::size_t i = 0; i < 3; ++i) {
    detail::put_endian(b, 80 + 4 * i, std::bit_cast<std::uint32_t>(static_cast<float>(v.pixdim[i])), big);
  }
  detail::put_endian(b, 108, std::bit_cast<std::uint32_t>(static_cast<float>(offset)), big);
  detail::put_endian(b, 112, std::bit_cast<std::uint32_t>(v.scl_slope), big);
  detail::put_endian(b, 116, std::bit_cast<std::uint32_t>(v.scl_inter), big);
  std::memcpy(b.data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < v.voxels(); ++i) {
    const std::size_t at = offset + i * esize;
    const double x = v.data[i];
    switch (v.datatype) {
      case kNiftiUint8: b[at] = static_cast<std::uint8_t>(std::lround(x)); break;
      case kNiftiInt16: detail::put_endian(b, at, static_cast<std::uint16_t>(std::lround(x)), big); break;
      case kNiftiInt32: detail::put_endian(b, at, static_cast<std::uint32_t>(std::lround(x)), big); break;
      case kNiftiFloat32: detail::put_endian(b, at, std::bit_cast<std::uint32_t>(static_cast<float>(x)), big); break;
      case kNiftiFloat64: detail::put_endian(b, at, std::bit_cast<std::uint64_t>(x), big); break;
      default: break;
    }
  }
  return b;
}

/// Writes gzip-compressed output when `path` ends in ".gz".
inline void write_nifti(const std::string& path, const NiftiVolume& v) {
  const io::Bytes b = encode_nifti(v);
  if (!detail::ends_with(path, ".gz")) {
    io::write_file(path, b);
    return;
  }
  gzFile f = gzopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  const int n = gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
  gzclose(f);
  if (n != static_cast<int>(b.size())) throw std::runtime_error("gzip write to '" + path + "' failed");
}

}  // namespace mmfed::data
