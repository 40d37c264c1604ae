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

// Model files ("FMU1"), little-endian:
//   "FMU1" | u64 entry count
//   | per entry: u64 name length, name bytes, u64 rank, rank x u64 dims
//   | all values as f64, in entry order

#pragma once

#include <memory>
#include <string>

#include "mmfed/binary.hpp"
#include "mmfed/param_vector.hpp"

namespace mmfed::io {

inline constexpr char kModelMagic[] = "FMU1";

inline Bytes encode_model(const ParamVector& p) {
  Bytes b;
  b.reserve(16 + p.size() * 8 + p.index().count() * 48);
  put_bytes(b, {kModelMagic, 4});
  put_u64(b, p.index().count());
  for (const auto& e : p.index().entries()) {
    put_u64(b, e.name.size());
    put_bytes(b, e.name);
    put_u64(b, e.shape.size());
    for (std::size_t d : e.shape) put_u64(b, d);
  }
  for (double v : p.values()) put_f64(b, v);
  return b;
}

inline ParamVector decode_model(const Bytes& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != std::string(kModelMagic, 4)) throw FormatError("magic is not 'FMU1'");
  const std::uint64_t count = r.u64("entry count");
  if (count > r.remaining() / 16) throw FormatError("entry count " + std::to_string(count) + " exceeds file size");
  auto index = std::make_shared<ShapeIndex>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string at = " of entry " + std::to_string(i);
    const std::uint64_t len = r.u64("name length" + at);
    std::string name = r.str(len, "name" + at);
    const std::uint64_t rank = r.u64("rank" + at);
    if (rank > 8) throw FormatError("rank " + std::to_string(rank) + at + " is above 8");
    Shape shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(r.u64("dim" + at));
    try {
      index->add(name, shape);
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what());
    }
  }
  if (r.remaining() != index->total() * 8) {
    throw FormatError("value block has " + std::to_string(r.remaining()) + " bytes, shape index needs " +
                      std::to_string(index->total() * 8));
  }
  std::vector<double> values(index->total());
  for (double& v : values) v = r.f64("values");
  return ParamVector(std::move(index), std::move(values));
}

inline void save_model(const std::string& path, const ParamVector& p) { write_file(path, encode_model(p)); }

inline ParamVector load_model(const std::string& path) {
  try {
    return decode_model(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

}  // namespace mmfed::io
