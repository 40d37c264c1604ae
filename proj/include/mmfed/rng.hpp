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
#include <random>
#include <string_view>

namespace mmfed {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of a named sub-stream. Streams with different names or indices are
/// decorrelated, so changing how one stage consumes randomness never shifts
/// another stage's draws.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t i = 0,
                                 std::uint64_t j = 0) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : stream) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  std::uint64_t s = splitmix64(master ^ splitmix64(h));
  s = splitmix64(s ^ splitmix64(i + 0x632be59bd9b4e019ULL));
  return splitmix64(s ^ splitmix64(j + 0x85157af5ULL));
}

inline Rng make_rng(std::uint64_t master, std::string_view stream, std::uint64_t i = 0, std::uint64_t j = 0) {
  return Rng(derive_seed(master, stream, i, j));
}

}  // namespace mmfed
