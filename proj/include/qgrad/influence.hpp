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

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qgrad/error.hpp"
#include "qgrad/log.hpp"
#include "qgrad/manifest.hpp"
#include "qgrad/parallel.hpp"
#include "qgrad/quantizer.hpp"
#include "qgrad/store.hpp"

namespace qgrad {

enum class ScoreMode : std::uint8_t { qless = 0, less_fp = 1, tracin = 2 };

inline const char* to_string(ScoreMode m) {
  switch (m) {
    case ScoreMode::qless: return "qless";
    case ScoreMode::less_fp: return "less_fp";
    case ScoreMode::tracin: return "tracin";
  }
  return "?";
}

inline ScoreMode score_mode_from_string(const std::string& s) {
  if (s == "qless") return ScoreMode::qless;
  if (s == "less_fp") return ScoreMode::less_fp;
  if (s == "tracin") return ScoreMode::tracin;
  throw config_error("unknown score mode: " + s);
}

enum class ValAggregation : std::uint8_t { mean = 0, sum = 1 };

inline const char* to_string(ValAggregation a) {
  return a == ValAggregation::mean ? "mean" : "sum";
}

inline ValAggregation val_aggregation_from_string(const std::string& s) {
  if (s == "mean") return ValAggregation::mean;
  if (s == "sum") return ValAggregation::sum;
  throw config_error("unknown val aggregation: " + s);
}

// What to do with zero-gradient vectors: drop their contributions with a
// warning, or refuse to score.
enum class DegeneratePolicy : std::uint8_t { skip = 0, error = 1 };

inline DegeneratePolicy degenerate_policy_from_string(const std::string& s) {
  if (s == "skip") return DegeneratePolicy::skip;
  if (s == "error") return DegeneratePolicy::error;
  throw config_error("unknown degenerate policy: " + s);
}

// ---------------------------------------------------------------------------
// Dot-product kernels. All accumulation orders are fixed, so results are
// identical for every thread count and batch shape.

namespace detail {

// Float dot with eight independent double lanes, combined in a fixed tree.
inline double dot_f32(const float* a, const float* b, std::size_t k) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t r = 0;
  const std::size_t whole = k - (k & 7);
  for (; r < whole; r += 8)
    for (int j = 0; j < 8; ++j)
      lanes[j] += static_cast<double>(a[r + j]) * static_cast<double>(b[r + j]);
  for (; r < k; ++r)
    lanes[r & 7] += static_cast<double>(a[r]) * static_cast<double>(b[r]);
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

// Signed 8-bit dot; 32-bit partials are safe for chunks of 32768 codes
// (32768 * 127^2 < 2^31), widened to 64-bit between chunks.
inline std::int64_t dot_i8(const std::int8_t* a, const std::int8_t* b,
                           std::size_t k) {
  std::int64_t total = 0;
  std::size_t r = 0;
  while (r < k) {
    const std::size_t end = std::min(k, r + 32768);
    std::int32_t acc = 0;
    for (; r < end; ++r)
      acc += static_cast<std::int32_t>(a[r]) * static_cast<std::int32_t>(b[r]);
    total += acc;
  }
  return total;
}

// Sign-vector dot from packed bits: k - 2 * popcount(a xor b). Padding bits
// beyond k are zero on both sides and cancel in the xor.
inline std::int64_t dot_sign(const std::uint64_t* a, const std::uint64_t* b,
                             std::size_t words, std::size_t k) {
  std::uint64_t diff = 0;
  for (std::size_t w = 0; w < words; ++w) diff += std::popcount(a[w] ^ b[w]);
  return static_cast<std::int64_t>(k) - 2 * static_cast<std::int64_t>(diff);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Normalization of quantized codes (Euclidean unit direction of the raw
// integer codes). The stored scale is deliberately not applied: any S > 0
// rescales codes uniformly, so the direction — and every cosine built from
// it — is unchanged.

inline std::vector<float> normalize_codes(const QuantizedVector& qv) {
  std::int64_t sq = 0;
  for (auto c : qv.codes)
    sq += static_cast<std::int32_t>(c) * static_cast<std::int32_t>(c);
  if (sq == 0)
    throw degenerate_error("normalize_codes: all-zero code vector for '" +
                           qv.sample_id + "'");
  const double inv = 1.0 / std::sqrt(static_cast<double>(sq));
  std::vector<float> out(qv.codes.size());
  for (std::size_t m = 0; m < qv.codes.size(); ++m)
    out[m] = static_cast<float>(qv.codes[m] * inv);
  return out;
}

inline std::optional<std::vector<float>> try_normalize_codes(
    const QuantizedVector& qv) {
  for (auto c : qv.codes)
    if (c != 0) return normalize_codes(qv);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// One sample's gradients across the manifest's checkpoints, either all
// quantized or all full precision.

struct GradientSeries {
  std::string sample_id;
  std::vector<QuantizedVector> quant;      // aligned to manifest order
  std::vector<std::vector<float>> fp;      // ditto

  bool is_quantized() const { return !quant.empty(); }

  void check_alignment(const CheckpointManifest& manifest) const {
    const std::size_t n =
        is_quantized() ? quant.size() : fp.size();
    if (!quant.empty() && !fp.empty())
      throw alignment_error("series '" + sample_id +
                            "' mixes quantized and full-precision entries");
    if (n != manifest.checkpoints.size())
      throw alignment_error("series '" + sample_id + "' has " +
                            std::to_string(n) + " entries for " +
                            std::to_string(manifest.checkpoints.size()) +
                            " manifest checkpoints");
    if (is_quantized()) {
      for (std::size_t i = 0; i < quant.size(); ++i)
        if (!quant[i].checkpoint_id.empty() &&
            quant[i].checkpoint_id != manifest.checkpoints[i].id)
          throw alignment_error(
              "series '" + sample_id + "' entry " + std::to_string(i) +
              " is for checkpoint '" + quant[i].checkpoint_id +
              "', manifest expects '" + manifest.checkpoints[i].id + "'");
    }
  }
};

namespace detail {

struct CosineTerm {
  double value = 0.0;
  bool skipped = false;
};

inline CosineTerm quant_cosine(const QuantizedVector& a,
                               const QuantizedVector& b,
                               DegeneratePolicy policy) {
  if (a.scheme != b.scheme)
    throw data_error("cannot compare schemes " + a.scheme.name() + " and " +
                     b.scheme.name());
  if (a.codes.size() != b.codes.size())
    throw dimension_error("code vectors of length " +
                          std::to_string(a.codes.size()) + " vs " +
                          std::to_string(b.codes.size()));
  std::int64_t sa = 0, sb = 0, ab = 0;
  for (std::size_t m = 0; m < a.codes.size(); ++m) {
    const std::int32_t x = a.codes[m], y = b.codes[m];
    sa += x * x;
    sb += y * y;
    ab += x * y;
  }
  const bool degen = a.degenerate || b.degenerate || sa == 0 || sb == 0;
  if (degen) {
    if (policy == DegeneratePolicy::error)
      throw degenerate_error("degenerate vector in pair ('" + a.sample_id +
                             "', '" + b.sample_id + "')");
    return {0.0, true};
  }
  return {static_cast<double>(ab) /
              (std::sqrt(static_cast<double>(sa)) *
               std::sqrt(static_cast<double>(sb))),
          false};
}

inline CosineTerm fp_cosine(std::span<const float> a, std::span<const float> b,
                            DegeneratePolicy policy) {
  if (a.size() != b.size())
    throw dimension_error("vectors of length " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
  const double na = dot_f32(a.data(), a.data(), a.size());
  const double nb = dot_f32(b.data(), b.data(), b.size());
  if (na == 0.0 || nb == 0.0) {
    if (policy == DegeneratePolicy::error)
      throw degenerate_error("degenerate full-precision vector in pair");
    return {0.0, true};
  }
  return {dot_f32(a.data(), b.data(), a.size()) / (std::sqrt(na) * std::sqrt(nb)),
          false};
}

}  // namespace detail

// Learning-rate-weighted cosine influence: sum_i eta_i <q^_val,i, q^_train,i>.
// Checkpoints with a degenerate side contribute nothing under skip policy.
inline double pair_influence(const GradientSeries& train,
                             const GradientSeries& val,
                             const CheckpointManifest& manifest,
                             DegeneratePolicy policy = DegeneratePolicy::skip) {
  train.check_alignment(manifest);
  val.check_alignment(manifest);
  if (train.is_quantized() != val.is_quantized())
    throw data_error("pair_influence: train and val series must both be "
                     "quantized or both full precision");
  double score = 0.0;
  for (std::size_t i = 0; i < manifest.checkpoints.size(); ++i) {
    const detail::CosineTerm t =
        train.is_quantized()
            ? detail::quant_cosine(train.quant[i], val.quant[i], policy)
            : detail::fp_cosine(train.fp[i], val.fp[i], policy);
    score += manifest.checkpoints[i].eta * t.value;
  }
  return score;
}

// Raw gradient-alignment influence: sum_i eta_i <g_val,i, g_train,i>,
// unnormalized, full precision only.
inline double tracin_influence(const GradientSeries& train,
                               const GradientSeries& val,
                               const CheckpointManifest& manifest) {
  train.check_alignment(manifest);
  val.check_alignment(manifest);
  if (train.is_quantized() || val.is_quantized())
    throw data_error("tracin_influence requires full-precision series");
  double score = 0.0;
  for (std::size_t i = 0; i < manifest.checkpoints.size(); ++i) {
    if (train.fp[i].size() != val.fp[i].size())
      throw dimension_error("tracin_influence: length mismatch at checkpoint " +
                            std::to_string(i));
    score += manifest.checkpoints[i].eta *
             detail::dot_f32(train.fp[i].data(), val.fp[i].data(),
                             train.fp[i].size());
  }
  return score;
}

// ---------------------------------------------------------------------------
// In-memory vector sets: one checkpoint's worth of train or val vectors in
// scoring-friendly layout. Quantized sets keep sign vectors bit-packed (the
// xor/popcount path) and wider codes unpacked to int8.

struct VectorSet {
  QuantScheme scheme{QuantMethod::fp32, 32};
  std::uint32_t k = 0;
  std::vector<std::string> ids;
  std::vector<float> fp;              // n*k when fp32
  std::vector<std::int8_t> codes;     // n*k when bits >= 2
  std::vector<std::uint64_t> bits;    // n*words when bits == 1
  std::size_t words = 0;              // u64 words per row (bits == 1)
  std::vector<float> scales;
  std::vector<std::uint8_t> degenerate;
  std::vector<double> norms;          // ||codes|| or ||v||

  std::size_t size() const { return ids.size(); }
  bool is_fp() const { return scheme.method == QuantMethod::fp32; }

  static VectorSet from_fp32(std::vector<std::string> ids_,
                             std::vector<float> data, std::uint32_t k_) {
    VectorSet s;
    s.scheme = QuantScheme{QuantMethod::fp32, 32};
    s.k = k_;
    s.ids = std::move(ids_);
    s.fp = std::move(data);
    if (s.fp.size() != s.ids.size() * static_cast<std::size_t>(k_))
      throw dimension_error("VectorSet: data size does not match ids * k");
    s.scales.assign(s.ids.size(), 1.0f);
    s.degenerate.assign(s.ids.size(), 0);
    s.norms.resize(s.ids.size());
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
      const double n2 = detail::dot_f32(s.fp.data() + i * k_,
                                        s.fp.data() + i * k_, k_);
      s.norms[i] = std::sqrt(n2);
      if (n2 == 0.0) s.degenerate[i] = 1;
    }
    return s;
  }

  static VectorSet from_store(const StoreReader& store) {
    VectorSet s;
    s.scheme = store.header().scheme();
    s.k = store.header().k;
    s.ids = store.sample_ids();
    const std::size_t n = s.ids.size();
    s.scales.resize(n);
    s.degenerate.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      s.scales[i] = store.scale_at(i);
      s.degenerate[i] = store.degenerate_at(i) ? 1 : 0;
    }
    s.norms.resize(n);
    if (s.is_fp()) {
      s.fp.resize(n * static_cast<std::size_t>(s.k));
      for (std::size_t i = 0; i < n; ++i) {
        const auto raw = store.packed_at(i);
        std::memcpy(s.fp.data() + i * s.k, raw.data(), s.k * 4ull);
        const double n2 = detail::dot_f32(s.fp.data() + i * s.k,
                                          s.fp.data() + i * s.k, s.k);
        s.norms[i] = std::sqrt(n2);
        if (n2 == 0.0) s.degenerate[i] = 1;
      }
    } else if (s.scheme.bits == 1) {
      s.words = (packed_code_bytes(s.k, 1) + 7) / 8;
      s.bits.assign(n * s.words, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto raw = store.packed_at(i);
        std::memcpy(s.bits.data() + i * s.words, raw.data(), raw.size());
      }
      // every sign vector has norm sqrt(k)
      const double nk = std::sqrt(static_cast<double>(s.k));
      for (std::size_t i = 0; i < n; ++i) s.norms[i] = nk;
    } else {
      s.codes.resize(n * static_cast<std::size_t>(s.k));
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = unpack_codes(store.packed_at(i), s.k, s.scheme.bits);
        std::memcpy(s.codes.data() + i * s.k, row.data(), s.k);
        std::int64_t sq = 0;
        for (std::int8_t c : row)
          sq += static_cast<std::int32_t>(c) * static_cast<std::int32_t>(c);
        s.norms[i] = std::sqrt(static_cast<double>(sq));
        if (sq == 0) s.degenerate[i] = 1;
      }
    }
    return s;
  }

  QuantizedVector quantized_at(std::size_t i, std::string checkpoint_id = {}) const {
    if (is_fp())
      throw data_error("VectorSet holds fp32 vectors, not codes");
    QuantizedVector qv;
    qv.sample_id = ids[i];
    qv.checkpoint_id = std::move(checkpoint_id);
    qv.scheme = scheme;
    qv.scale = scales[i];
    qv.degenerate = degenerate[i] != 0;
    if (scheme.bits == 1) {
      qv.codes.resize(k);
      const std::uint64_t* row = bits.data() + i * words;
      for (std::uint32_t m = 0; m < k; ++m)
        qv.codes[m] = (row[m >> 6] >> (m & 63)) & 1u ? 1 : -1;
    } else {
      qv.codes.assign(codes.begin() + i * k, codes.begin() + (i + 1) * k);
    }
    return qv;
  }
};

// Quantizes every row of an fp32 set. Row order, ids and degeneracy carry
// over; this is the in-memory equivalent of the quantize CLI step.
inline VectorSet quantize_set(const VectorSet& src, QuantScheme scheme,
                              int threads = 0) {
  scheme.validate();
  if (!src.is_fp())
    throw scheme_error("quantize_set: source must hold fp32 vectors");
  if (scheme.method == QuantMethod::fp32) return src;
  VectorSet out;
  out.scheme = scheme;
  out.k = src.k;
  out.ids = src.ids;
  const std::size_t n = src.size();
  out.scales.resize(n);
  out.degenerate.resize(n);
  out.norms.resize(n);
  if (scheme.bits == 1) {
    out.words = (packed_code_bytes(src.k, 1) + 7) / 8;
    out.bits.assign(n * out.words, 0);
  } else {
    out.codes.resize(n * static_cast<std::size_t>(src.k));
  }
  parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const QuantizedVector qv = quantize(
          std::span<const float>(src.fp.data() + i * src.k, src.k), scheme);
      out.scales[i] = qv.scale;
      out.degenerate[i] = qv.degenerate ? 1 : 0;
      if (scheme.bits == 1) {
        std::uint64_t* row = out.bits.data() + i * out.words;
        for (std::uint32_t m = 0; m < src.k; ++m)
          if (qv.codes[m] > 0) row[m >> 6] |= 1ull << (m & 63);
        out.norms[i] = std::sqrt(static_cast<double>(src.k));
      } else {
        std::memcpy(out.codes.data() + i * src.k, qv.codes.data(), src.k);
        std::int64_t sq = 0;
        for (std::int8_t c : qv.codes)
          sq += static_cast<std::int32_t>(c) * static_cast<std::int32_t>(c);
        out.norms[i] = std::sqrt(static_cast<double>(sq));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Score table: one row per train sample, one column per validation task.

struct ScoreTable {
  std::vector<std::string> train_ids;
  std::vector<std::string> tasks;
  std::vector<double> values;  // row-major, train_ids.size() x tasks.size()

  // provenance, carried into selection sidecars
  std::string mode;
  std::string scheme;
  std::string manifest_hash;
  std::string val_aggregation = "mean";

  double at(std::size_t row, std::size_t col) const {
    return values[row * tasks.size() + col];
  }
  double& at(std::size_t row, std::size_t col) {
    return values[row * tasks.size() + col];
  }

  void check_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) throw data_error("score table has non-finite values");
  }

  // CSV: header "sample_id,<task>..."; scores in scientific notation with
  // nine significant digits.
  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write scores to '" + path.string() + "'");
    out << "sample_id";
    for (const auto& t : tasks) out << "," << t;
    out << "\n";
    char buf[32];
    for (std::size_t r = 0; r < train_ids.size(); ++r) {
      out << train_ids[r];
      for (std::size_t c = 0; c < tasks.size(); ++c) {
        std::snprintf(buf, sizeof buf, "%.8e", at(r, c));
        out << "," << buf;
      }
      out << "\n";
    }
    if (!out) throw io_error("write to '" + path.string() + "' failed");
  }

  static ScoreTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open scores '" + path.string() + "'");
    ScoreTable t;
    std::string line;
    if (!std::getline(in, line))
      throw format_error("scores '" + path.string() + "': empty file");
    std::size_t pos = line.find(',');
    if (line.substr(0, pos) != "sample_id")
      throw format_error("scores '" + path.string() +
                         "': header must start with sample_id");
    while (pos != std::string::npos) {
      const std::size_t next = line.find(',', pos + 1);
      t.tasks.push_back(line.substr(pos + 1, next == std::string::npos
                                                 ? std::string::npos
                                                 : next - pos - 1));
      pos = next;
    }
    if (t.tasks.empty())
      throw format_error("scores '" + path.string() + "': no task columns");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::size_t p = line.find(',');
      if (p == std::string::npos)
        throw format_error("scores '" + path.string() + "': malformed row '" +
                           line + "'");
      t.train_ids.push_back(line.substr(0, p));
      for (std::size_t c = 0; c < t.tasks.size(); ++c) {
        const std::size_t next = line.find(',', p + 1);
        const std::string cell = line.substr(
            p + 1, next == std::string::npos ? std::string::npos : next - p - 1);
        try {
          t.values.push_back(std::stod(cell));
        } catch (const std::exception&) {
          throw format_error("scores '" + path.string() +
                             "': bad score value '" + cell + "'");
        }
        p = next;
        if (p == std::string::npos && c + 1 < t.tasks.size())
          throw format_error("scores '" + path.string() + "': row for '" +
                             t.train_ids.back() + "' has too few columns");
      }
    }
    t.check_finite();
    return t;
  }

  // Binary cache: exact doubles plus provenance, for selector handoff.
  void write_binary(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write '" + path.string() + "'");
    const char magic[8] = {'Q', 'G', 'S', 'C', 'O', 'R', 'E', 'B'};
    out.write(magic, 8);
    auto put_str = [&](const std::string& s) {
      const std::uint32_t len = static_cast<std::uint32_t>(s.size());
      out.write(reinterpret_cast<const char*>(&len), 4);
      out.write(s.data(), static_cast<std::streamsize>(s.size()));
    };
    const std::uint64_t rows = train_ids.size();
    const std::uint32_t cols = static_cast<std::uint32_t>(tasks.size());
    out.write(reinterpret_cast<const char*>(&rows), 8);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    put_str(mode);
    put_str(scheme);
    put_str(manifest_hash);
    put_str(val_aggregation);
    for (const auto& t : tasks) put_str(t);
    for (const auto& id : train_ids) put_str(id);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * 8));
    if (!out) throw io_error("write to '" + path.string() + "' failed");
  }

  static ScoreTable read_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path.string() + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "QGSCOREB", 8) != 0)
      throw format_error("'" + path.string() + "' is not a binary score cache");
    auto get_str = [&]() {
      std::uint32_t len = 0;
      in.read(reinterpret_cast<char*>(&len), 4);
      std::string s(len, '\0');
      in.read(s.data(), len);
      return s;
    };
    ScoreTable t;
    std::uint64_t rows = 0;
    std::uint32_t cols = 0;
    in.read(reinterpret_cast<char*>(&rows), 8);
    in.read(reinterpret_cast<char*>(&cols), 4);
    t.mode = get_str();
    t.scheme = get_str();
    t.manifest_hash = get_str();
    t.val_aggregation = get_str();
    for (std::uint32_t c = 0; c < cols; ++c) t.tasks.push_back(get_str());
    for (std::uint64_t r = 0; r < rows; ++r) t.train_ids.push_back(get_str());
    t.values.resize(static_cast<std::size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * 8));
    if (!in) throw corruption_error("'" + path.string() + "' truncated");
    t.check_finite();
    return t;
  }
};

// ---------------------------------------------------------------------------
// Batch scoring.

struct ScoreOptions {
  ValAggregation val_agg = ValAggregation::mean;
  DegeneratePolicy degenerate = DegeneratePolicy::skip;
  int threads = 0;
};

// Validation task: everything before the first '/' in the sample id; ids
// without a '/' fall into a single "default" task.
inline std::string task_of_sample(const std::string& val_id) {
  const auto pos = val_id.find('/');
  return pos == std::string::npos ? std::string("default")
                                  : val_id.substr(0, pos);
}

namespace detail {

// Row indices of `ids` in every set, so checkpoints may store samples in
// any order. Missing samples raise a coverage error naming them.
inline std::vector<std::vector<std::size_t>> align_rows(
    const std::vector<const VectorSet*>& sets,
    const std::vector<std::string>& ids, const char* what) {
  std::vector<std::vector<std::size_t>> rows(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    if (s == 0) {
      rows[0].resize(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) rows[0][i] = i;
      continue;
    }
    std::unordered_map<std::string, std::size_t> index;
    index.reserve(sets[s]->size());
    for (std::size_t i = 0; i < sets[s]->size(); ++i)
      index.emplace(sets[s]->ids[i], i);
    rows[s].resize(ids.size());
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto it = index.find(ids[i]);
      if (it == index.end()) {
        if (missing.size() < 10) missing.push_back(ids[i]);
      } else {
        rows[s][i] = it->second;
      }
    }
    if (!missing.empty()) {
      std::string msg = std::string(what) + " samples missing at checkpoint " +
                        std::to_string(s) + ":";
      for (const auto& m : missing) msg += " '" + m + "'";
      throw coverage_error(msg);
    }
    if (sets[s]->size() != ids.size())
      throw coverage_error(std::string(what) + " checkpoint " +
                           std::to_string(s) + " holds " +
                           std::to_string(sets[s]->size()) +
                           " samples, checkpoint 0 holds " +
                           std::to_string(ids.size()));
  }
  return rows;
}

}  // namespace detail

// Scores every train sample against every validation task over aligned
// in-memory sets (one per checkpoint, in manifest order).
//
// Reduction order is fixed: each (train, val) pair's influence accumulates
// over checkpoints first; a task's pairs then aggregate in validation store
// order. Train rows are independent, so any thread count produces the same
// table bit for bit.
inline ScoreTable score_sets(const std::vector<const VectorSet*>& train_sets,
                             const std::vector<const VectorSet*>& val_sets,
                             const std::vector<double>& etas, ScoreMode mode,
                             const ScoreOptions& options = {}) {
  const std::size_t n_cp = etas.size();
  if (n_cp == 0 || train_sets.size() != n_cp || val_sets.size() != n_cp)
    throw alignment_error("score_sets: train/val sets and etas must all have "
                          "one entry per checkpoint");
  const VectorSet& t0 = *train_sets[0];
  const VectorSet& v0 = *val_sets[0];
  for (std::size_t i = 0; i < n_cp; ++i) {
    const VectorSet& t = *train_sets[i];
    const VectorSet& v = *val_sets[i];
    if (t.k != t0.k || v.k != t0.k)
      throw dimension_error("score_sets: inconsistent k across sets");
    if (t.scheme != t0.scheme || v.scheme != t0.scheme)
      throw scheme_error("score_sets: all sets must share one scheme, found " +
                         t.scheme.name() + " / " + v.scheme.name() + " vs " +
                         t0.scheme.name());
  }
  const bool fp = t0.is_fp();
  if (mode == ScoreMode::qless && fp)
    throw scheme_error("qless mode needs quantized stores, got fp32");
  if (mode != ScoreMode::qless && !fp)
    throw scheme_error(std::string(to_string(mode)) +
                       " mode needs fp32 stores, got " + t0.scheme.name());

  const auto train_rows = detail::align_rows(train_sets, t0.ids, "train");
  const auto val_rows = detail::align_rows(val_sets, v0.ids, "val");

  // task layout from the first checkpoint's validation ids
  ScoreTable table;
  table.mode = to_string(mode);
  table.scheme = t0.scheme.name();
  table.val_aggregation = to_string(options.val_agg);
  table.train_ids = t0.ids;
  std::vector<std::size_t> task_of(v0.size());
  {
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t v = 0; v < v0.size(); ++v) {
      const std::string task = task_of_sample(v0.ids[v]);
      auto [it, inserted] = seen.emplace(task, table.tasks.size());
      if (inserted) table.tasks.push_back(task);
      task_of[v] = it->second;
    }
  }
  const std::size_t n_tasks = table.tasks.size();
  const std::size_t n_train = t0.size();
  const std::size_t n_val = v0.size();
  table.values.assign(n_train * n_tasks, 0.0);

  // validation samples dead at every checkpoint drop out of their task
  std::vector<std::uint8_t> val_dead(n_val, 0);
  std::size_t dead_vals = 0;
  if (options.degenerate == DegeneratePolicy::skip) {
    std::size_t degen_vectors = 0;
    for (std::size_t i = 0; i < n_cp; ++i) {
      for (const auto flag : train_sets[i]->degenerate) degen_vectors += flag;
      for (const auto flag : val_sets[i]->degenerate) degen_vectors += flag;
    }
    if (degen_vectors > 0)
      log::warn("score: skipping " + std::to_string(degen_vectors) +
                " zero-gradient vector(s) across checkpoints");
    for (std::size_t v = 0; v < n_val; ++v) {
      bool all_degen = true;
      for (std::size_t i = 0; i < n_cp && all_degen; ++i)
        all_degen = val_sets[i]->degenerate[val_rows[i][v]] != 0;
      if (all_degen) {
        val_dead[v] = 1;
        ++dead_vals;
      }
    }
    if (dead_vals > 0)
      log::warn("score: " + std::to_string(dead_vals) +
                " validation sample(s) have zero gradients at every "
                "checkpoint; excluded from aggregation");
  }
  std::vector<std::size_t> task_count(n_tasks, 0);
  for (std::size_t v = 0; v < n_val; ++v)
    if (!val_dead[v]) ++task_count[task_of[v]];

  parallel_for(n_train, options.threads, [&](std::size_t begin, std::size_t end) {
    std::vector<double> pair_acc(n_val);
    for (std::size_t ti = begin; ti < end; ++ti) {
      std::fill(pair_acc.begin(), pair_acc.end(), 0.0);
      for (std::size_t cp = 0; cp < n_cp; ++cp) {
        const VectorSet& ts = *train_sets[cp];
        const VectorSet& vs = *val_sets[cp];
        const std::size_t tr = train_rows[cp][ti];
        const double eta = etas[cp];
        if (mode == ScoreMode::tracin) {
          const float* a = ts.fp.data() + tr * ts.k;
          for (std::size_t v = 0; v < n_val; ++v) {
            const std::size_t vr = val_rows[cp][v];
            pair_acc[v] += eta * detail::dot_f32(
                                     a, vs.fp.data() + vr * vs.k, ts.k);
          }
          continue;
        }
        // cosine modes skip any side that is degenerate at this checkpoint
        const bool tr_degen = ts.degenerate[tr] != 0;
        if (tr_degen && options.degenerate == DegeneratePolicy::error)
          throw degenerate_error("degenerate train vector '" + ts.ids[tr] +
                                 "' at checkpoint " + std::to_string(cp));
        if (tr_degen) continue;
        if (fp) {
          const float* a = ts.fp.data() + tr * ts.k;
          const double an = ts.norms[tr];
          for (std::size_t v = 0; v < n_val; ++v) {
            const std::size_t vr = val_rows[cp][v];
            if (vs.degenerate[vr]) {
              if (options.degenerate == DegeneratePolicy::error)
                throw degenerate_error("degenerate val vector '" +
                                       vs.ids[vr] + "' at checkpoint " +
                                       std::to_string(cp));
              continue;
            }
            const double dot =
                detail::dot_f32(a, vs.fp.data() + vr * vs.k, ts.k);
            pair_acc[v] += eta * (dot / (an * vs.norms[vr]));
          }
        } else if (ts.scheme.bits == 1) {
          const std::uint64_t* a = ts.bits.data() + tr * ts.words;
          const double inv_k = 1.0 / static_cast<double>(ts.k);
          for (std::size_t v = 0; v < n_val; ++v) {
            const std::size_t vr = val_rows[cp][v];
            if (vs.degenerate[vr]) {
              if (options.degenerate == DegeneratePolicy::error)
                throw degenerate_error("degenerate val vector '" +
                                       vs.ids[vr] + "' at checkpoint " +
                                       std::to_string(cp));
              continue;
            }
            const std::int64_t dot = detail::dot_sign(
                a, vs.bits.data() + vr * vs.words, ts.words, ts.k);
            pair_acc[v] += eta * (static_cast<double>(dot) * inv_k);
          }
        } else {
          const std::int8_t* a = ts.codes.data() + tr * ts.k;
          const double an = ts.norms[tr];
          for (std::size_t v = 0; v < n_val; ++v) {
            const std::size_t vr = val_rows[cp][v];
            if (vs.degenerate[vr]) {
              if (options.degenerate == DegeneratePolicy::error)
                throw degenerate_error("degenerate val vector '" +
                                       vs.ids[vr] + "' at checkpoint " +
                                       std::to_string(cp));
              continue;
            }
            const std::int64_t dot =
                detail::dot_i8(a, vs.codes.data() + vr * vs.k, ts.k);
            pair_acc[v] += eta * (static_cast<double>(dot) / (an * vs.norms[vr]));
          }
        }
      }
      for (std::size_t task = 0; task < n_tasks; ++task) {
        double acc = 0.0;
        for (std::size_t v = 0; v < n_val; ++v)
          if (task_of[v] == task && !val_dead[v]) acc += pair_acc[v];
        if (options.val_agg == ValAggregation::mean && task_count[task] > 0)
          acc /= static_cast<double>(task_count[task]);
        table.at(ti, task) = acc;
      }
    }
  });
  table.check_finite();
  return table;
}

// File-backed scoring: loads the train/val stores named by the manifest and
// runs score_sets. The manifest must carry both store paths per checkpoint.
inline ScoreTable score_all(const CheckpointManifest& manifest, ScoreMode mode,
                            const ScoreOptions& options = {}) {
  manifest.validate();
  std::vector<VectorSet> train_owned, val_owned;
  train_owned.reserve(manifest.checkpoints.size());
  val_owned.reserve(manifest.checkpoints.size());
  for (const auto& cp : manifest.checkpoints) {
    if (cp.train_store_resolved.empty() || cp.val_store_resolved.empty())
      throw config_error("manifest checkpoint '" + cp.id +
                         "' needs both train_store and val_store for scoring");
    StoreReader train(cp.train_store_resolved);
    StoreReader val(cp.val_store_resolved);
    if (train.header().checkpoint_id != cp.id)
      throw alignment_error("store '" + train.path().string() +
                            "' was built for checkpoint '" +
                            train.header().checkpoint_id +
                            "', manifest expects '" + cp.id + "'");
    if (val.header().checkpoint_id != cp.id)
      throw alignment_error("store '" + val.path().string() +
                            "' was built for checkpoint '" +
                            val.header().checkpoint_id +
                            "', manifest expects '" + cp.id + "'");
    train_owned.push_back(VectorSet::from_store(train));
    val_owned.push_back(VectorSet::from_store(val));
  }
  std::vector<const VectorSet*> train_sets, val_sets;
  for (auto& s : train_owned) train_sets.push_back(&s);
  for (auto& s : val_owned) val_sets.push_back(&s);
  return score_sets(train_sets, val_sets, manifest.etas(), mode, options);
}

}  // namespace qgrad
