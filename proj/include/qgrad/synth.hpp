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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qgrad/error.hpp"
#include "qgrad/influence.hpp"
#include "qgrad/manifest.hpp"
#include "qgrad/parallel.hpp"
#include "qgrad/prng.hpp"
#include "qgrad/projector.hpp"
#include "qgrad/quantizer.hpp"
#include "qgrad/selector.hpp"
#include "qgrad/stats.hpp"

namespace qgrad {

// Synthetic gradient corpus with planted structure: each validation task has
// a centroid direction; a known subset of train samples leans toward it.
// Everything is a pure function of (seed, indices), so raw vectors are
// regenerated on demand instead of being stored.
struct SynthConfig {
  std::uint64_t seed = 0;
  std::uint64_t d = 4096;
  std::uint32_t k = 1024;
  std::uint32_t n_train = 20000;
  std::uint32_t n_val = 50;
  std::uint32_t n_tasks = 3;
  std::uint32_t n_checkpoints = 4;
  std::uint32_t cluster_count = 100;   // planted train samples per task
  double cluster_strength = 0.5;       // centroid fraction in planted vectors
  double noise_sigma = 1.0;

  void validate() const {
    if (d == 0 || k == 0 || n_train == 0 || n_val == 0 || n_tasks == 0 ||
        n_checkpoints == 0)
      throw config_error("synth config: all counts must be >= 1");
    if (!(cluster_strength >= 0.0 && cluster_strength <= 1.0))
      throw config_error("synth config: cluster_strength must be in [0, 1]");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
      throw config_error("synth config: noise_sigma must be finite and >= 0");
    if (static_cast<std::uint64_t>(cluster_count) * n_tasks > n_train)
      throw config_error("synth config: cluster_count * n_tasks exceeds n_train");
    if (n_checkpoints > 255)
      throw config_error("synth config: at most 255 checkpoints");
  }
};

class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(SynthConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    centroids_.resize(static_cast<std::size_t>(cfg_.n_tasks) * cfg_.d);
    for (std::uint32_t t = 0; t < cfg_.n_tasks; ++t)
      fill_gaussian(cfg_.seed, 0, streams::pack(streams::kSynthCentroid, t, 0),
                    {centroids_.data() + static_cast<std::size_t>(t) * cfg_.d,
                     cfg_.d});
  }

  const SynthConfig& config() const noexcept { return cfg_; }

  std::uint32_t planted_total() const {
    return cfg_.cluster_count * cfg_.n_tasks;
  }
  bool is_planted(std::uint32_t s) const { return s < planted_total(); }
  std::uint32_t planted_task(std::uint32_t s) const {
    return s / cfg_.cluster_count;
  }

  std::string train_id(std::uint32_t s) const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "train%08u", s);
    return buf;
  }

  std::string task_name(std::uint32_t t) const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "task%u", t);
    return buf;
  }

  // Validation samples are split into contiguous near-equal task blocks.
  std::uint32_t val_task(std::uint32_t v) const {
    const std::uint32_t base = cfg_.n_val / cfg_.n_tasks;
    const std::uint32_t rem = cfg_.n_val % cfg_.n_tasks;
    // tasks [0, rem) hold base+1 samples
    const std::uint32_t cut = rem * (base + 1);
    if (v < cut) return v / (base + 1);
    return rem + (v - cut) / std::max<std::uint32_t>(base, 1);
  }

  std::string val_id(std::uint32_t v) const {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%s/val%06u", task_name(val_task(v)).c_str(),
                  v);
    return buf;
  }

  std::span<const float> centroid(std::uint32_t t) const {
    return {centroids_.data() + static_cast<std::size_t>(t) * cfg_.d, cfg_.d};
  }

  // Train gradient for sample s at checkpoint cp. Planted samples point
  // toward their task centroid with fresh noise per checkpoint.
  void train_vector(std::uint32_t s, std::uint32_t cp,
                    std::span<float> out) const {
    fill_gaussian(cfg_.seed, 0, streams::pack(streams::kSynthTrain, s, cp), out);
    const float sigma = static_cast<float>(cfg_.noise_sigma);
    if (is_planted(s) && cfg_.cluster_strength > 0.0) {
      const float w = static_cast<float>(cfg_.cluster_strength);
      const std::span<const float> c = centroid(planted_task(s));
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = w * c[i] + sigma * out[i];
    } else {
      for (auto& x : out) x *= sigma;
    }
  }

  void val_vector(std::uint32_t v, std::uint32_t cp,
                  std::span<float> out) const {
    fill_gaussian(cfg_.seed, 0, streams::pack(streams::kSynthVal, v, cp), out);
    const float sigma = static_cast<float>(cfg_.noise_sigma);
    const std::span<const float> c = centroid(val_task(v));
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = c[i] + sigma * out[i];
  }

  // Linearly decaying schedule from a 2e-5 peak, one entry per checkpoint.
  CheckpointManifest manifest() const {
    CheckpointManifest m;
    const auto n = cfg_.n_checkpoints;
    for (std::uint32_t i = 0; i < n; ++i) {
      CheckpointEntry e;
      e.id = "cp" + std::to_string(i + 1);
      e.eta = 2e-5 * static_cast<double>(n - i) / static_cast<double>(n);
      m.checkpoints.push_back(std::move(e));
    }
    return m;
  }

 private:
  SynthConfig cfg_;
  std::vector<float> centroids_;
};

// ---------------------------------------------------------------------------
// Full-precision reference scorer. Works directly in R^d on the raw
// generated vectors — no projection, no quantization, its own plain loops —
// and is the ground truth every fidelity metric compares against.

namespace detail {

// Deliberately separate from the scoring kernels in influence.hpp; four
// double lanes, fixed combine order.
inline double oracle_dot(const float* a, const float* b, std::size_t d) {
  double l0 = 0, l1 = 0, l2 = 0, l3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= d; i += 4) {
    l0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    l1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    l2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    l3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  for (; i < d; ++i) l0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (l0 + l1) + (l2 + l3);
}

}  // namespace detail

// One sample's raw gradients across checkpoints, for the explicit-input
// oracle entry point.
struct RawSeries {
  std::string sample_id;
  std::vector<std::vector<float>> per_checkpoint;
};

// Learning-rate-weighted cosine scores computed naively in the original
// dimension. Zero vectors contribute nothing (there is no direction to
// compare) and fully-zero validation samples leave their task's mean.
inline ScoreTable oracle_scores(const std::vector<RawSeries>& train,
                                const std::vector<RawSeries>& val,
                                const CheckpointManifest& manifest,
                                ValAggregation agg = ValAggregation::mean) {
  manifest.validate();
  const std::size_t n_cp = manifest.checkpoints.size();
  for (const auto& s : train)
    if (s.per_checkpoint.size() != n_cp)
      throw alignment_error("oracle: train series '" + s.sample_id +
                            "' not aligned to manifest");
  for (const auto& s : val)
    if (s.per_checkpoint.size() != n_cp)
      throw alignment_error("oracle: val series '" + s.sample_id +
                            "' not aligned to manifest");

  ScoreTable table;
  table.mode = "oracle";
  table.scheme = "fp_exact";
  table.val_aggregation = to_string(agg);
  for (const auto& s : train) table.train_ids.push_back(s.sample_id);
  std::vector<std::size_t> task_of(val.size());
  {
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t v = 0; v < val.size(); ++v) {
      const std::string task = task_of_sample(val[v].sample_id);
      auto [it, inserted] = seen.emplace(task, table.tasks.size());
      if (inserted) table.tasks.push_back(task);
      task_of[v] = it->second;
    }
  }
  table.values.assign(train.size() * table.tasks.size(), 0.0);

  std::vector<std::vector<double>> val_norms(n_cp,
                                             std::vector<double>(val.size()));
  std::vector<std::uint8_t> val_dead(val.size(), 1);
  for (std::size_t cp = 0; cp < n_cp; ++cp)
    for (std::size_t v = 0; v < val.size(); ++v) {
      const auto& x = val[v].per_checkpoint[cp];
      val_norms[cp][v] = std::sqrt(detail::oracle_dot(x.data(), x.data(), x.size()));
      if (val_norms[cp][v] > 0.0) val_dead[v] = 0;
    }
  std::vector<std::size_t> task_count(table.tasks.size(), 0);
  for (std::size_t v = 0; v < val.size(); ++v)
    if (!val_dead[v]) ++task_count[task_of[v]];

  for (std::size_t t = 0; t < train.size(); ++t) {
    std::vector<double> pair(val.size(), 0.0);
    for (std::size_t cp = 0; cp < n_cp; ++cp) {
      const auto& g = train[t].per_checkpoint[cp];
      const double gn = std::sqrt(detail::oracle_dot(g.data(), g.data(), g.size()));
      if (gn == 0.0) continue;
      const double eta = manifest.checkpoints[cp].eta;
      for (std::size_t v = 0; v < val.size(); ++v) {
        const auto& x = val[v].per_checkpoint[cp];
        if (val_norms[cp][v] == 0.0) continue;
        if (x.size() != g.size())
          throw dimension_error("oracle: dimension mismatch train/val");
        pair[v] += eta * (detail::oracle_dot(g.data(), x.data(), g.size()) /
                          (gn * val_norms[cp][v]));
      }
    }
    for (std::size_t task = 0; task < table.tasks.size(); ++task) {
      double acc = 0.0;
      for (std::size_t v = 0; v < val.size(); ++v)
        if (task_of[v] == task && !val_dead[v]) acc += pair[v];
      if (agg == ValAggregation::mean && task_count[task] > 0)
        acc /= static_cast<double>(task_count[task]);
      table.at(t, task) = acc;
    }
  }
  table.check_finite();
  return table;
}

// Streaming oracle over a synthetic corpus: validation vectors are held in
// memory, train vectors are regenerated per sample.
inline ScoreTable oracle_scores(const SyntheticCorpus& corpus,
                                ValAggregation agg = ValAggregation::mean,
                                int threads = 0) {
  const SynthConfig& cfg = corpus.config();
  const CheckpointManifest manifest = corpus.manifest();
  const std::size_t n_cp = cfg.n_checkpoints;
  const std::size_t d = cfg.d;

  std::vector<std::vector<float>> val_data(n_cp);
  std::vector<std::vector<double>> val_norms(n_cp,
                                             std::vector<double>(cfg.n_val));
  for (std::size_t cp = 0; cp < n_cp; ++cp) {
    val_data[cp].resize(static_cast<std::size_t>(cfg.n_val) * d);
    for (std::uint32_t v = 0; v < cfg.n_val; ++v) {
      float* dst = val_data[cp].data() + static_cast<std::size_t>(v) * d;
      corpus.val_vector(v, static_cast<std::uint32_t>(cp), {dst, d});
      val_norms[cp][v] = std::sqrt(detail::oracle_dot(dst, dst, d));
    }
  }

  ScoreTable table;
  table.mode = "oracle";
  table.scheme = "fp_exact";
  table.val_aggregation = to_string(agg);
  table.train_ids.resize(cfg.n_train);
  for (std::uint32_t s = 0; s < cfg.n_train; ++s)
    table.train_ids[s] = corpus.train_id(s);
  std::vector<std::size_t> task_of(cfg.n_val);
  for (std::uint32_t v = 0; v < cfg.n_val; ++v) {
    const std::size_t t = corpus.val_task(v);
    while (table.tasks.size() <= t) table.tasks.push_back(corpus.task_name(
        static_cast<std::uint32_t>(table.tasks.size())));
    task_of[v] = t;
  }
  const std::size_t n_tasks = table.tasks.size();
  table.values.assign(static_cast<std::size_t>(cfg.n_train) * n_tasks, 0.0);
  std::vector<std::size_t> task_count(n_tasks, 0);
  for (std::uint32_t v = 0; v < cfg.n_val; ++v) ++task_count[task_of[v]];

  parallel_for(cfg.n_train, threads, [&](std::size_t begin, std::size_t end) {
    std::vector<float> g(d);
    std::vector<double> pair(cfg.n_val);
    for (std::size_t s = begin; s < end; ++s) {
      std::fill(pair.begin(), pair.end(), 0.0);
      for (std::size_t cp = 0; cp < n_cp; ++cp) {
        corpus.train_vector(static_cast<std::uint32_t>(s),
                            static_cast<std::uint32_t>(cp), g);
        const double gn = std::sqrt(detail::oracle_dot(g.data(), g.data(), d));
        if (gn == 0.0) continue;
        const double eta = manifest.checkpoints[cp].eta;
        for (std::uint32_t v = 0; v < cfg.n_val; ++v) {
          if (val_norms[cp][v] == 0.0) continue;
          const float* x = val_data[cp].data() + static_cast<std::size_t>(v) * d;
          pair[v] += eta * (detail::oracle_dot(g.data(), x, d) /
                            (gn * val_norms[cp][v]));
        }
      }
      for (std::size_t task = 0; task < n_tasks; ++task) {
        double acc = 0.0;
        for (std::uint32_t v = 0; v < cfg.n_val; ++v)
          if (task_of[v] == task) acc += pair[v];
        if (agg == ValAggregation::mean && task_count[task] > 0)
          acc /= static_cast<double>(task_count[task]);
        table.at(s, task) = acc;
      }
    }
  });
  table.check_finite();
  return table;
}

// ---------------------------------------------------------------------------
// Projection of a whole corpus into per-checkpoint fp32 sets.

inline std::vector<VectorSet> project_corpus_train(const SyntheticCorpus& corpus,
                                                   const Projector& projector,
                                                   int threads = 0) {
  const SynthConfig& cfg = corpus.config();
  const std::size_t d = cfg.d, k = cfg.k;
  std::vector<std::string> ids(cfg.n_train);
  for (std::uint32_t s = 0; s < cfg.n_train; ++s) ids[s] = corpus.train_id(s);
  std::vector<VectorSet> sets;
  for (std::uint32_t cp = 0; cp < cfg.n_checkpoints; ++cp) {
    std::vector<float> projected(static_cast<std::size_t>(cfg.n_train) * k);
    parallel_for(cfg.n_train, threads, [&](std::size_t begin, std::size_t end) {
      constexpr std::size_t kBatch = 64;
      std::vector<float> raw(kBatch * d);
      for (std::size_t s = begin; s < end; s += kBatch) {
        const std::size_t m = std::min(kBatch, end - s);
        for (std::size_t i = 0; i < m; ++i)
          corpus.train_vector(static_cast<std::uint32_t>(s + i), cp,
                              {raw.data() + i * d, d});
        projector.project_batch(raw.data(), m, projected.data() + s * k);
      }
    });
    sets.push_back(VectorSet::from_fp32(ids, std::move(projected),
                                        static_cast<std::uint32_t>(k)));
  }
  return sets;
}

inline std::vector<VectorSet> project_corpus_val(const SyntheticCorpus& corpus,
                                                 const Projector& projector,
                                                 int threads = 0) {
  const SynthConfig& cfg = corpus.config();
  const std::size_t d = cfg.d, k = cfg.k;
  std::vector<std::string> ids(cfg.n_val);
  for (std::uint32_t v = 0; v < cfg.n_val; ++v) ids[v] = corpus.val_id(v);
  std::vector<VectorSet> sets;
  for (std::uint32_t cp = 0; cp < cfg.n_checkpoints; ++cp) {
    std::vector<float> projected(static_cast<std::size_t>(cfg.n_val) * k);
    parallel_for(cfg.n_val, threads, [&](std::size_t begin, std::size_t end) {
      std::vector<float> raw(d);
      for (std::size_t v = begin; v < end; ++v) {
        corpus.val_vector(static_cast<std::uint32_t>(v), cp, raw);
        projector.project_batch(raw.data(), 1, projected.data() + v * k);
      }
    });
    sets.push_back(VectorSet::from_fp32(ids, std::move(projected),
                                        static_cast<std::uint32_t>(k)));
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Fidelity sweep: runs project -> quantize -> score -> select per scheme and
// measures how well each quantized pipeline tracks the full-precision
// pipeline and the exact oracle.

struct FidelityCase {
  std::string scheme;          // "fp32" for the unquantized baseline
  int bits = 32;
  double spearman_vs_fp = 0;   // mean over task columns
  double spearman_vs_oracle = 0;
  double overlap_vs_fp = 0;    // top-fraction selection overlap
  double overlap_vs_oracle = 0;
  double zero_bin = std::numeric_limits<double>::quiet_NaN();
  double planted_recovery = 0;
};

struct FidelityReport {
  SynthConfig config;
  double fraction = 0.05;
  std::vector<FidelityCase> cases;

  nlohmann::json to_json() const {
    nlohmann::json cases_json = nlohmann::json::array();
    for (const auto& c : cases) {
      nlohmann::json cj{{"scheme", c.scheme},
                        {"bits", c.bits},
                        {"spearman_vs_fp", c.spearman_vs_fp},
                        {"spearman_vs_oracle", c.spearman_vs_oracle},
                        {"overlap_vs_fp", c.overlap_vs_fp},
                        {"overlap_vs_oracle", c.overlap_vs_oracle},
                        {"planted_recovery", c.planted_recovery}};
      if (!std::isnan(c.zero_bin)) cj["zero_bin"] = c.zero_bin;
      cases_json.push_back(std::move(cj));
    }
    return nlohmann::json{
        {"config",
         {{"seed", config.seed},
          {"d", config.d},
          {"k", config.k},
          {"n_train", config.n_train},
          {"n_val", config.n_val},
          {"n_tasks", config.n_tasks},
          {"n_checkpoints", config.n_checkpoints},
          {"cluster_count", config.cluster_count},
          {"cluster_strength", config.cluster_strength},
          {"noise_sigma", config.noise_sigma}}},
        {"fraction", fraction},
        {"cases", cases_json}};
  }

  static constexpr const char* kCsvHeader =
      "seed,scheme,bits,spearman_vs_fp,spearman_vs_oracle,overlap_vs_fp,"
      "overlap_vs_oracle,zero_bin,planted_recovery";

  void append_csv(std::ostream& out) const {
    for (const auto& c : cases) {
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "%llu,%s,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                    static_cast<unsigned long long>(config.seed),
                    c.scheme.c_str(), c.bits, c.spearman_vs_fp,
                    c.spearman_vs_oracle, c.overlap_vs_fp, c.overlap_vs_oracle,
                    std::isnan(c.zero_bin) ? -1.0 : c.zero_bin,
                    c.planted_recovery);
      out << buf << "\n";
    }
  }
};

namespace detail {

// Fraction of each task's planted samples recovered in the top
// cluster_count rows of that task's score column, averaged over tasks.
inline double planted_recovery(const ScoreTable& table,
                               const SyntheticCorpus& corpus) {
  const SynthConfig& cfg = corpus.config();
  if (cfg.cluster_count == 0) return 0.0;
  double total = 0.0;
  for (std::size_t task = 0; task < table.tasks.size(); ++task) {
    std::vector<ScoredSample> column(table.train_ids.size());
    for (std::size_t r = 0; r < table.train_ids.size(); ++r)
      column[r] = {table.train_ids[r], table.at(r, task)};
    auto better = [](const ScoredSample& a, const ScoredSample& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.sample_id < b.sample_id;
    };
    const std::size_t top = std::min<std::size_t>(cfg.cluster_count,
                                                  column.size());
    std::partial_sort(column.begin(), column.begin() + top, column.end(),
                      better);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < top; ++i) {
      // planted ids are the first cluster_count*n_tasks train indices,
      // grouped by task
      for (std::uint32_t s = static_cast<std::uint32_t>(task) * cfg.cluster_count;
           s < (static_cast<std::uint32_t>(task) + 1) * cfg.cluster_count; ++s) {
        if (column[i].sample_id == corpus.train_id(s)) {
          ++hits;
          break;
        }
      }
    }
    total += static_cast<double>(hits) / static_cast<double>(top);
  }
  return total / static_cast<double>(table.tasks.size());
}

inline double mean_column_spearman(const ScoreTable& a, const ScoreTable& b) {
  if (a.tasks.size() != b.tasks.size() ||
      a.train_ids.size() != b.train_ids.size())
    throw config_error("spearman: tables have different shapes");
  const std::size_t rows = a.train_ids.size();
  std::vector<double> ca(rows), cb(rows);
  double total = 0.0;
  for (std::size_t task = 0; task < a.tasks.size(); ++task) {
    for (std::size_t r = 0; r < rows; ++r) {
      ca[r] = a.at(r, task);
      cb[r] = b.at(r, task);
    }
    total += spearman(ca, cb);
  }
  return total / static_cast<double>(a.tasks.size());
}

inline SelectionResult select_from_table(const ScoreTable& table, double p) {
  SelectionConfig cfg;
  cfg.fraction = p;
  return select_top(aggregate(table, TaskReduction::max), p, cfg);
}

inline double set_zero_bin(const std::vector<VectorSet>& sets) {
  std::size_t zeros = 0, total = 0;
  for (const auto& s : sets) {
    for (std::int8_t c : s.codes)
      if (c == 0) ++zeros;
    total += s.codes.size();
  }
  return total == 0 ? std::numeric_limits<double>::quiet_NaN()
                    : static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace detail

inline FidelityReport fidelity_sweep(const SynthConfig& config,
                                     const std::vector<QuantScheme>& schemes,
                                     double fraction = 0.05,
                                     ValAggregation agg = ValAggregation::mean,
                                     int threads = 0) {
  for (const auto& s : schemes) {
    s.validate();
    if (s.method == QuantMethod::fp32)
      throw config_error("fidelity_sweep: fp32 baseline is always included; "
                         "list only quantized schemes");
  }
  SyntheticCorpus corpus(config);
  const CheckpointManifest manifest = corpus.manifest();
  const auto etas = manifest.etas();

  ProjectionSpec pspec;
  pspec.seed = config.seed;
  pspec.input_dim = config.d;
  pspec.output_dim = config.k;
  pspec.dist = Distribution::rademacher;
  Projector projector(pspec);

  const auto train_fp = project_corpus_train(corpus, projector, threads);
  const auto val_fp = project_corpus_val(corpus, projector, threads);
  auto views = [](const std::vector<VectorSet>& v) {
    std::vector<const VectorSet*> out;
    for (const auto& s : v) out.push_back(&s);
    return out;
  };

  ScoreOptions opts;
  opts.val_agg = agg;
  opts.threads = threads;

  const ScoreTable oracle = oracle_scores(corpus, agg, threads);
  const ScoreTable fp_table =
      score_sets(views(train_fp), views(val_fp), etas, ScoreMode::less_fp, opts);
  const SelectionResult sel_oracle = detail::select_from_table(oracle, fraction);
  const SelectionResult sel_fp = detail::select_from_table(fp_table, fraction);

  FidelityReport report;
  report.config = config;
  report.fraction = fraction;

  FidelityCase base;
  base.scheme = "fp32";
  base.bits = 32;
  base.spearman_vs_fp = 1.0;  // same table by definition
  base.spearman_vs_oracle = detail::mean_column_spearman(fp_table, oracle);
  base.overlap_vs_fp = 1.0;
  base.overlap_vs_oracle = selection_overlap(sel_fp, sel_oracle);
  base.planted_recovery = detail::planted_recovery(fp_table, corpus);
  report.cases.push_back(base);

  for (const auto& scheme : schemes) {
    std::vector<VectorSet> train_q, val_q;
    for (const auto& s : train_fp) train_q.push_back(quantize_set(s, scheme, threads));
    for (const auto& s : val_fp) val_q.push_back(quantize_set(s, scheme, threads));
    const ScoreTable q_table =
        score_sets(views(train_q), views(val_q), etas, ScoreMode::qless, opts);
    const SelectionResult sel_q = detail::select_from_table(q_table, fraction);

    FidelityCase c;
    c.scheme = scheme.name();
    c.bits = scheme.bits;
    c.spearman_vs_fp = detail::mean_column_spearman(q_table, fp_table);
    c.spearman_vs_oracle = detail::mean_column_spearman(q_table, oracle);
    c.overlap_vs_fp = selection_overlap(sel_q, sel_fp);
    c.overlap_vs_oracle = selection_overlap(sel_q, sel_oracle);
    if (scheme.method != QuantMethod::sign) c.zero_bin = detail::set_zero_bin(train_q);
    c.planted_recovery = detail::planted_recovery(q_table, corpus);
    report.cases.push_back(c);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Raw corpus emission for driving the CLI pipeline end to end: one flat
// float32 file plus JSON sidecar per (split, checkpoint), and a manifest
// skeleton carrying checkpoint ids and learning rates.

inline void write_raw_corpus(const SyntheticCorpus& corpus,
                             const std::filesystem::path& dir) {
  const SynthConfig& cfg = corpus.config();
  std::filesystem::create_directories(dir);
  std::vector<float> row(cfg.d);
  const CheckpointManifest manifest = corpus.manifest();
  for (std::uint32_t cp = 0; cp < cfg.n_checkpoints; ++cp) {
    const std::string cp_id = manifest.checkpoints[cp].id;
    for (const bool is_val : {false, true}) {
      const std::uint32_t n = is_val ? cfg.n_val : cfg.n_train;
      const std::string stem =
          std::string(is_val ? "val_" : "train_") + cp_id + ".bin";
      const std::filesystem::path bin = dir / stem;
      std::ofstream out(bin, std::ios::binary);
      if (!out) throw io_error("cannot write '" + bin.string() + "'");
      nlohmann::json ids = nlohmann::json::array();
      for (std::uint32_t i = 0; i < n; ++i) {
        if (is_val)
          corpus.val_vector(i, cp, row);
        else
          corpus.train_vector(i, cp, row);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * 4));
        ids.push_back(is_val ? corpus.val_id(i) : corpus.train_id(i));
      }
      if (!out) throw io_error("write to '" + bin.string() + "' failed");
      out.close();
      nlohmann::json sidecar{{"d", cfg.d},
                             {"count", n},
                             {"sample_ids", std::move(ids)},
                             {"checkpoint_id", cp_id}};
      std::ofstream sc(bin.string() + ".json");
      if (!sc) throw io_error("cannot write sidecar for '" + bin.string() + "'");
      sc << sidecar.dump() << "\n";
    }
  }
  manifest.save(dir / "manifest.json");
}

}  // namespace qgrad
