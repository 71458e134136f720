// Copyright 2026 The qgrad Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace qgrad {

// Philox 4x32-10 counter-based generator (Salmon et al., SC'11).
//
// Every 128-bit output block is a pure function of (key, counter, stream),
// so any position in any stream can be regenerated independently — no state,
// no sequencing, safe from any number of threads.
struct philox4x32 {
  static constexpr int kRounds = 10;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;

  static std::array<std::uint32_t, 4> block(std::uint64_t key,
                                            std::uint64_t counter,
                                            std::uint64_t stream) noexcept {
    std::uint32_t c0 = static_cast<std::uint32_t>(counter);
    std::uint32_t c1 = static_cast<std::uint32_t>(counter >> 32);
    std::uint32_t c2 = static_cast<std::uint32_t>(stream);
    std::uint32_t c3 = static_cast<std::uint32_t>(stream >> 32);
    std::uint32_t k0 = static_cast<std::uint32_t>(key);
    std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
    for (int r = 0;; ++r) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c0;
      const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c2;
      const std::uint32_t t0 = c1;
      const std::uint32_t t3 = c3;
      c0 = static_cast<std::uint32_t>(p1 >> 32) ^ t0 ^ k0;
      c1 = static_cast<std::uint32_t>(p1);
      c2 = static_cast<std::uint32_t>(p0 >> 32) ^ t3 ^ k1;
      c3 = static_cast<std::uint32_t>(p0);
      if (r == kRounds - 1) break;
      k0 += kWeyl0;
      k1 += kWeyl1;
    }
    return {c0, c1, c2, c3};
  }

  static std::uint64_t bits64(std::uint64_t key, std::uint64_t counter,
                              std::uint64_t stream) noexcept {
    const auto w = block(key, counter, stream);
    return (static_cast<std::uint64_t>(w[1]) << 32) | w[0];
  }
};

// Distinct stream tags so independent consumers of the same seed never
// collide in counter space. Layout of the 64-bit stream word:
//   [63:56] tag   [55:8] consumer payload (e.g. sample index)   [7:0] sub id
namespace streams {
inline constexpr std::uint64_t kProjectorRademacher = 1;
inline constexpr std::uint64_t kProjectorGaussian = 2;
inline constexpr std::uint64_t kSynthCentroid = 3;
inline constexpr std::uint64_t kSynthTrain = 4;
inline constexpr std::uint64_t kSynthVal = 5;
inline constexpr std::uint64_t kBench = 6;

inline constexpr std::uint64_t pack(std::uint64_t tag, std::uint64_t payload,
                                    std::uint64_t sub) noexcept {
  return (tag << 56) | ((payload & 0xFFFFFFFFFFFFull) << 8) | (sub & 0xFF);
}
}  // namespace streams

// Uniform float in [0, 1) from the top 24 bits.
inline float unit_float(std::uint32_t w) noexcept {
  return static_cast<float>(w >> 8) * 0x1.0p-24f;
}

// Uniform double in (0, 1]; never zero, so it is safe under log().
inline double unit_double_open(std::uint32_t w) noexcept {
  return (static_cast<double>(w) + 1.0) * 0x1.0p-32;
}

// Four standard normals per philox block via Box–Muller.
inline std::array<float, 4> gaussian4(std::uint64_t key, std::uint64_t counter,
                                      std::uint64_t stream) noexcept {
  const auto w = philox4x32::block(key, counter, stream);
  std::array<float, 4> out;
  for (int i = 0; i < 2; ++i) {
    const double u = unit_double_open(w[2 * i]);
    const double v = static_cast<double>(w[2 * i + 1]) * 0x1.0p-32;
    const double r = std::sqrt(-2.0 * std::log(u));
    const double a = 2.0 * std::numbers::pi * v;
    out[2 * i] = static_cast<float>(r * std::cos(a));
    out[2 * i + 1] = static_cast<float>(r * std::sin(a));
  }
  return out;
}

// Fills `out` with standard normals; element j comes from block
// base_counter + j/4, lane j%4, independent of call granularity.
inline void fill_gaussian(std::uint64_t key, std::uint64_t base_counter,
                          std::uint64_t stream, std::span<float> out) {
  std::size_t j = 0;
  while (j < out.size()) {
    const auto g = gaussian4(key, base_counter + (j >> 2), stream);
    std::size_t lane = j & 3;
    for (; lane < 4 && j < out.size(); ++lane, ++j) out[j] = g[lane];
  }
}

}  // namespace qgrad
