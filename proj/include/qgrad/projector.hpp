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
#include <span>
#include <string>
#include <vector>

#include "qgrad/error.hpp"
#include "qgrad/parallel.hpp"
#include "qgrad/prng.hpp"
#include "qgrad/quantizer.hpp"

namespace qgrad {

enum class Distribution : std::uint8_t { rademacher = 0, gaussian = 1 };

inline const char* to_string(Distribution d) {
  return d == Distribution::rademacher ? "rademacher" : "gaussian";
}

inline Distribution distribution_from_string(const std::string& s) {
  if (s == "rademacher") return Distribution::rademacher;
  if (s == "gaussian") return Distribution::gaussian;
  throw config_error("unknown distribution: " + s);
}

// Defines the random map R: R^d -> R^k. Two equal specs produce
// bit-identical projections of equal inputs, on any machine.
struct ProjectionSpec {
  std::uint64_t seed = 0;
  std::uint64_t input_dim = 0;   // d
  std::uint32_t output_dim = 0;  // k
  Distribution dist = Distribution::rademacher;

  void validate() const {
    if (input_dim == 0 || output_dim == 0)
      throw config_error("projection dims must be positive (d=" +
                         std::to_string(input_dim) + ", k=" +
                         std::to_string(output_dim) + ")");
    if (static_cast<std::uint64_t>(output_dim) > input_dim)
      throw config_error("output dim k=" + std::to_string(output_dim) +
                         " exceeds input dim d=" + std::to_string(input_dim));
  }

  bool operator==(const ProjectionSpec&) const = default;
};

// One raw dense gradient vector, identified by (sample, checkpoint).
struct RawGradientRecord {
  std::string sample_id;
  std::string checkpoint_id;
  std::vector<float> values;
};

// Seeded random projection with block-wise generation. R's entry (r, c) is
// a pure function of (seed, r, c): the flat index e = c*k + r addresses a
// fixed position in a counter-based stream, so any block of columns can be
// regenerated independently and the d x k matrix never exists in memory.
//
// Entries are Rademacher +-1/sqrt(k) (default) or Gaussian N(0, 1/k); with
// that scaling, projected inner products estimate the original ones
// directly. Immutable after construction; concurrent use is fine.
class Projector {
 public:
  explicit Projector(ProjectionSpec spec, std::size_t block_cols = 256)
      : spec_(spec),
        block_cols_(block_cols == 0 ? 256 : block_cols),
        inv_sqrt_k_(1.0f / std::sqrt(static_cast<float>(spec.output_dim))) {
    spec_.validate();
  }

  const ProjectionSpec& spec() const noexcept { return spec_; }

  // Single entry of R; the definition the whole class is built around.
  float entry(std::uint32_t row, std::uint64_t col) const {
    const std::uint64_t e = col * spec_.output_dim + row;
    if (spec_.dist == Distribution::rademacher) {
      const auto w = philox4x32::block(
          spec_.seed, e >> 7,
          streams::pack(streams::kProjectorRademacher, 0, 0));
      const std::uint32_t bit = static_cast<std::uint32_t>(e & 127);
      const bool plus = (w[bit >> 5] >> (bit & 31)) & 1u;
      return plus ? inv_sqrt_k_ : -inv_sqrt_k_;
    }
    const auto g = gaussian4(spec_.seed, e >> 2,
                             streams::pack(streams::kProjectorGaussian, 0, 0));
    return g[e & 3] * inv_sqrt_k_;
  }

  // out = R * in. Accumulation runs over columns in strictly increasing
  // order, so results do not depend on block_cols or record batching.
  void project(std::span<const float> in, std::span<float> out) const {
    check_input(in);
    if (out.size() != spec_.output_dim)
      throw dimension_error("output span has length " +
                            std::to_string(out.size()) + ", expected k=" +
                            std::to_string(spec_.output_dim));
    project_batch(in.data(), 1, out.data());
  }

  std::vector<float> project(const RawGradientRecord& rec) const {
    std::vector<float> out(spec_.output_dim);
    check_input(rec.values, rec.sample_id);
    project_batch(rec.values.data(), 1, out.data());
    return out;
  }

  // Projects n row-major records at once; `in` is n x d, `out` is n x k.
  // Batching amortizes regeneration of R's blocks across records.
  void project_batch(const float* in, std::size_t n, float* out) const {
    const std::size_t d = spec_.input_dim;
    const std::size_t k = spec_.output_dim;
    std::fill(out, out + n * k, 0.0f);
    std::vector<float> block(block_cols_ * k);
    for (std::size_t c0 = 0; c0 < d; c0 += block_cols_) {
      const std::size_t cb = std::min(block_cols_, d - c0);
      generate_block(c0, cb, block.data());
      for (std::size_t rt = 0; rt < n; rt += 4) {
        const std::size_t tile = std::min<std::size_t>(4, n - rt);
        accumulate_tile(in + rt * d + c0, d, block.data(), cb, k,
                        out + rt * k, tile);
      }
    }
  }

  // Threaded wrapper; each record is produced by exactly one worker, so the
  // result is identical for any thread count.
  void project_many(const float* in, std::size_t n, float* out,
                    int threads = 0) const {
    const std::size_t d = spec_.input_dim;
    const std::size_t k = spec_.output_dim;
    parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
      constexpr std::size_t kChunk = 64;
      for (std::size_t i = begin; i < end; i += kChunk) {
        const std::size_t m = std::min(kChunk, end - i);
        project_batch(in + i * d, m, out + i * k);
      }
    });
  }

 private:
  void check_input(std::span<const float> in,
                   const std::string& sample_id = {}) const {
    if (in.size() != spec_.input_dim)
      throw dimension_error("gradient" +
                            (sample_id.empty() ? std::string()
                                               : " '" + sample_id + "'") +
                            " has length " + std::to_string(in.size()) +
                            ", expected d=" + std::to_string(spec_.input_dim));
    for (float x : in)
      if (!std::isfinite(x))
        throw data_error("non-finite gradient value" +
                         (sample_id.empty() ? std::string()
                                            : " in '" + sample_id + "'"));
  }

  // Fills cb columns starting at c0, column-major: dst[(c-c0)*k + r].
  void generate_block(std::size_t c0, std::size_t cb, float* dst) const {
    const std::size_t k = spec_.output_dim;
    if (spec_.dist == Distribution::rademacher) {
      const std::uint64_t stream =
          streams::pack(streams::kProjectorRademacher, 0, 0);
      for (std::size_t c = 0; c < cb; ++c) {
        float* col = dst + c * k;
        std::uint64_t e = (c0 + c) * k;
        std::size_t produced = 0;
        while (produced < k) {
          const auto w = philox4x32::block(spec_.seed, e >> 7, stream);
          std::uint32_t bit = static_cast<std::uint32_t>(e & 127);
          const std::size_t take = std::min<std::size_t>(128 - bit, k - produced);
          for (std::size_t i = 0; i < take; ++i, ++bit)
            col[produced + i] =
                (w[bit >> 5] >> (bit & 31)) & 1u ? inv_sqrt_k_ : -inv_sqrt_k_;
          produced += take;
          e += take;
        }
      }
    } else {
      const std::uint64_t stream =
          streams::pack(streams::kProjectorGaussian, 0, 0);
      for (std::size_t c = 0; c < cb; ++c) {
        float* col = dst + c * k;
        std::uint64_t e = (c0 + c) * k;
        std::size_t produced = 0;
        while (produced < k) {
          const auto g = gaussian4(spec_.seed, e >> 2, stream);
          std::uint32_t lane = static_cast<std::uint32_t>(e & 3);
          for (; lane < 4 && produced < k; ++lane, ++produced, ++e)
            col[produced] = g[lane] * inv_sqrt_k_;
        }
      }
    }
  }

  // y_t += x_t[c] * col for up to four records sharing each column load.
  static void accumulate_tile(const float* in, std::size_t d,
                              const float* block, std::size_t cb,
                              std::size_t k, float* out, std::size_t tile) {
    switch (tile) {
      case 4: {
        float* __restrict__ y0 = out;
        float* __restrict__ y1 = out + k;
        float* __restrict__ y2 = out + 2 * k;
        float* __restrict__ y3 = out + 3 * k;
        for (std::size_t c = 0; c < cb; ++c) {
          const float x0 = in[c];
          const float x1 = in[d + c];
          const float x2 = in[2 * d + c];
          const float x3 = in[3 * d + c];
          if (x0 == 0.0f && x1 == 0.0f && x2 == 0.0f && x3 == 0.0f) continue;
          const float* __restrict__ col = block + c * k;
          for (std::size_t r = 0; r < k; ++r) {
            const float cr = col[r];
            y0[r] += x0 * cr;
            y1[r] += x1 * cr;
            y2[r] += x2 * cr;
            y3[r] += x3 * cr;
          }
        }
        break;
      }
      default: {
        for (std::size_t t = 0; t < tile; ++t) {
          float* __restrict__ y = out + t * k;
          const float* xrow = in + t * d;
          for (std::size_t c = 0; c < cb; ++c) {
            const float x = xrow[c];
            if (x == 0.0f) continue;
            const float* __restrict__ col = block + c * k;
            for (std::size_t r = 0; r < k; ++r) y[r] += x * col[r];
          }
        }
        break;
      }
    }
  }

  ProjectionSpec spec_;
  std::size_t block_cols_;
  float inv_sqrt_k_;
};

}  // namespace qgrad
