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

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qgrad/error.hpp"

namespace qgrad {

// Storage methods. fp32 is the unquantized passthrough used by projected
// stores; quantize() itself only targets the three integer schemes.
enum class QuantMethod : std::uint8_t {
  fp32 = 0,
  absmax = 1,
  absmean = 2,
  sign = 3,
};

inline const char* to_string(QuantMethod m) {
  switch (m) {
    case QuantMethod::fp32: return "fp32";
    case QuantMethod::absmax: return "absmax";
    case QuantMethod::absmean: return "absmean";
    case QuantMethod::sign: return "sign";
  }
  return "?";
}

inline QuantMethod quant_method_from_string(const std::string& s) {
  if (s == "fp32") return QuantMethod::fp32;
  if (s == "absmax") return QuantMethod::absmax;
  if (s == "absmean") return QuantMethod::absmean;
  if (s == "sign") return QuantMethod::sign;
  throw config_error("unknown quantization method: " + s);
}

struct QuantScheme {
  QuantMethod method = QuantMethod::absmax;
  std::uint8_t bits = 8;

  // Largest code magnitude: 2^(b-1) - 1.
  int max_code() const noexcept { return (1 << (bits - 1)) - 1; }

  void validate() const {
    if (method == QuantMethod::fp32) {
      if (bits != 32)
        throw scheme_error("fp32 storage uses bits=32, got " +
                           std::to_string(bits));
      return;
    }
    if (bits != 1 && bits != 2 && bits != 4 && bits != 8)
      throw scheme_error("bitwidth must be one of {1,2,4,8}, got " +
                         std::to_string(bits));
    if (method == QuantMethod::sign && bits != 1)
      throw scheme_error("sign scheme is 1-bit only");
    // At b=1 the code range collapses to {0}, so scaled schemes need b >= 2.
    if (method != QuantMethod::sign && bits == 1)
      throw scheme_error("1-bit requires scheme=sign");
  }

  bool operator==(const QuantScheme&) const = default;

  std::string name() const {
    return std::string(to_string(method)) + std::to_string(int(bits));
  }
};

// quantize() output: k small signed codes plus one scale factor.
struct QuantizedVector {
  std::string sample_id;
  std::string checkpoint_id;
  QuantScheme scheme;
  float scale = 1.0f;
  bool degenerate = false;  // input was the zero vector
  std::vector<std::int8_t> codes;
};

namespace detail {

// Nearest integer, halves away from zero. std::round has exactly this
// contract; routed through here so call sites document the intent.
inline long round_half_away(double x) noexcept {
  return static_cast<long>(std::round(x));
}

inline void require_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) throw data_error("non-finite value in input vector");
}

}  // namespace detail

// Quantizes one real vector. Scale/code rules per scheme:
//   absmax:  S = max|v|,  codes = round(alpha * v / S)          (|codes| <= alpha)
//   absmean: S = mean|v|, codes = clamp(round(v / S), -a, +a)
//   sign:    S = mean|v|, codes = +1 for v >= 0 else -1
// The zero vector quantizes to all-zero codes (sign: all +1) with S = 1 and
// the degenerate flag set; scoring decides what to do with those.
inline QuantizedVector quantize(std::span<const float> v, QuantScheme scheme,
                                std::string sample_id = {},
                                std::string checkpoint_id = {}) {
  scheme.validate();
  if (scheme.method == QuantMethod::fp32)
    throw scheme_error("quantize() targets integer schemes, not fp32");
  if (v.empty()) throw dimension_error("cannot quantize an empty vector");
  detail::require_finite(v);

  QuantizedVector out;
  out.sample_id = std::move(sample_id);
  out.checkpoint_id = std::move(checkpoint_id);
  out.scheme = scheme;
  out.codes.resize(v.size());

  double absmax = 0.0, abssum = 0.0;
  for (float x : v) {
    const double a = std::fabs(static_cast<double>(x));
    if (a > absmax) absmax = a;
    abssum += a;
  }
  const double absmean = abssum / static_cast<double>(v.size());

  if (absmax == 0.0) {
    out.degenerate = true;
    out.scale = 1.0f;
    if (scheme.method == QuantMethod::sign)
      for (auto& c : out.codes) c = 1;
    return out;
  }

  // an all-denormal vector can push mean|v| below float range; keep S > 0
  const auto to_scale = [](double s) {
    const float f = static_cast<float>(s);
    return f > 0.0f ? f : std::numeric_limits<float>::min();
  };
  const int alpha = scheme.max_code();
  switch (scheme.method) {
    case QuantMethod::absmax: {
      out.scale = to_scale(absmax);
      const double s = static_cast<double>(out.scale);
      for (std::size_t m = 0; m < v.size(); ++m) {
        long q = detail::round_half_away(alpha * (static_cast<double>(v[m]) / s));
        if (q > alpha) q = alpha;
        if (q < -alpha) q = -alpha;
        out.codes[m] = static_cast<std::int8_t>(q);
      }
      break;
    }
    case QuantMethod::absmean: {
      out.scale = to_scale(absmean);
      const double s = static_cast<double>(out.scale);
      for (std::size_t m = 0; m < v.size(); ++m) {
        long q = detail::round_half_away(static_cast<double>(v[m]) / s);
        if (q > alpha) q = alpha;
        if (q < -alpha) q = -alpha;
        out.codes[m] = static_cast<std::int8_t>(q);
      }
      break;
    }
    case QuantMethod::sign: {
      out.scale = to_scale(absmean);
      for (std::size_t m = 0; m < v.size(); ++m)
        out.codes[m] = v[m] >= 0.0f ? 1 : -1;
      break;
    }
    case QuantMethod::fp32:
      break;  // unreachable
  }
  return out;
}

// Reconstruction: absmax divides the scale back out by alpha; absmean and
// sign multiply codes by the scale directly.
inline std::vector<float> dequantize(const QuantizedVector& qv) {
  qv.scheme.validate();
  std::vector<float> out(qv.codes.size());
  const double s = qv.scale;
  const double factor = qv.scheme.method == QuantMethod::absmax
                            ? s / qv.scheme.max_code()
                            : s;
  for (std::size_t m = 0; m < qv.codes.size(); ++m)
    out[m] = static_cast<float>(qv.codes[m] * factor);
  return out;
}

inline std::size_t packed_code_bytes(std::size_t k, int bits) {
  return (k * static_cast<std::size_t>(bits) + 7) / 8;
}

// Bit-packs codes, little-endian bit order within each byte. b in {2,4,8}
// uses two's-complement b-bit fields; b=1 maps +1 -> bit 1, -1 -> bit 0.
inline std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes,
                                            int bits) {
  if (bits != 1 && bits != 2 && bits != 4 && bits != 8)
    throw encoding_error("pack_codes: unsupported bitwidth " +
                         std::to_string(bits));
  std::vector<std::uint8_t> out(packed_code_bytes(codes.size(), bits), 0);
  if (bits == 1) {
    for (std::size_t m = 0; m < codes.size(); ++m) {
      const int c = codes[m];
      if (c != 1 && c != -1)
        throw encoding_error("pack_codes: 1-bit codes must be +1/-1, got " +
                             std::to_string(c));
      if (c == 1) out[m >> 3] |= static_cast<std::uint8_t>(1u << (m & 7));
    }
    return out;
  }
  const int alpha = (1 << (bits - 1)) - 1;
  const std::uint8_t mask = static_cast<std::uint8_t>((1u << bits) - 1);
  const int per_byte = 8 / bits;
  for (std::size_t m = 0; m < codes.size(); ++m) {
    const int c = codes[m];
    if (c > alpha || c < -alpha)
      throw encoding_error("pack_codes: code " + std::to_string(c) +
                           " out of range for " + std::to_string(bits) +
                           "-bit");
    const std::uint8_t field = static_cast<std::uint8_t>(c) & mask;
    out[m / per_byte] |=
        static_cast<std::uint8_t>(field << (bits * (m % per_byte)));
  }
  return out;
}

inline std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> bytes,
                                             std::size_t k, int bits) {
  if (bits != 1 && bits != 2 && bits != 4 && bits != 8)
    throw decoding_error("unpack_codes: unsupported bitwidth " +
                         std::to_string(bits));
  if (bytes.size() < packed_code_bytes(k, bits))
    throw decoding_error("unpack_codes: buffer holds " +
                         std::to_string(bytes.size()) + " bytes, need " +
                         std::to_string(packed_code_bytes(k, bits)));
  std::vector<std::int8_t> out(k);
  if (bits == 1) {
    for (std::size_t m = 0; m < k; ++m)
      out[m] = (bytes[m >> 3] >> (m & 7)) & 1u ? 1 : -1;
    return out;
  }
  const std::uint8_t mask = static_cast<std::uint8_t>((1u << bits) - 1);
  const int per_byte = 8 / bits;
  const std::uint8_t sign_bit = static_cast<std::uint8_t>(1u << (bits - 1));
  for (std::size_t m = 0; m < k; ++m) {
    std::uint8_t field =
        (bytes[m / per_byte] >> (bits * (m % per_byte))) & mask;
    // sign-extend the b-bit two's-complement field
    if (field & sign_bit) field |= static_cast<std::uint8_t>(~mask);
    out[m] = static_cast<std::int8_t>(field);
  }
  return out;
}

// Fraction of codes that landed in the zero bin. Sign has no zero bin.
inline double zero_bin_fraction(std::span<const std::int8_t> codes,
                                QuantScheme scheme) {
  scheme.validate();
  if (scheme.method == QuantMethod::sign)
    throw scheme_error("zero_bin_fraction: sign scheme has no zero bin");
  if (scheme.method == QuantMethod::fp32)
    throw scheme_error("zero_bin_fraction: fp32 storage has no bins");
  if (codes.empty()) throw dimension_error("zero_bin_fraction: empty codes");
  std::size_t zeros = 0;
  for (auto c : codes)
    if (c == 0) ++zeros;
  return static_cast<double>(zeros) / static_cast<double>(codes.size());
}

inline double zero_bin_fraction(const QuantizedVector& qv) {
  return zero_bin_fraction(std::span<const std::int8_t>(qv.codes), qv.scheme);
}

}  // namespace qgrad
