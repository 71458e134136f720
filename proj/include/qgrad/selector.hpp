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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "qgrad/error.hpp"
#include "qgrad/influence.hpp"

namespace qgrad {

enum class TaskReduction : std::uint8_t { max = 0, mean = 1 };

inline const char* to_string(TaskReduction r) {
  return r == TaskReduction::max ? "max" : "mean";
}

inline TaskReduction task_reduction_from_string(const std::string& s) {
  if (s == "max") return TaskReduction::max;
  if (s == "mean") return TaskReduction::mean;
  throw config_error("unknown task reduction: " + s);
}

struct SelectionConfig {
  double fraction = 0.05;
  ValAggregation val_aggregation = ValAggregation::mean;  // applied upstream
  TaskReduction task_reduction = TaskReduction::max;
  // ties always break by ascending sample_id; recorded for provenance

  void validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0))
      throw config_error("selection fraction must be in (0, 1], got " +
                         std::to_string(fraction));
  }
};

struct ScoredSample {
  std::string sample_id;
  double score = 0.0;
};

// Collapses task columns into one final score per train sample.
inline std::vector<ScoredSample> aggregate(const ScoreTable& table,
                                           TaskReduction reduction) {
  if (table.train_ids.empty() || table.tasks.empty())
    throw config_error("aggregate: empty score table");
  table.check_finite();
  std::vector<ScoredSample> out(table.train_ids.size());
  const std::size_t n_tasks = table.tasks.size();
  for (std::size_t r = 0; r < table.train_ids.size(); ++r) {
    double value = table.at(r, 0);
    for (std::size_t c = 1; c < n_tasks; ++c) {
      const double x = table.at(r, c);
      if (reduction == TaskReduction::max)
        value = std::max(value, x);
      else
        value += x;
    }
    if (reduction == TaskReduction::mean)
      value /= static_cast<double>(n_tasks);
    out[r] = {table.train_ids[r], value};
  }
  return out;
}

struct SelectionResult {
  std::vector<ScoredSample> selected;  // non-increasing scores, id-tiebroken
  std::size_t selected_count = 0;
  std::size_t universe_size = 0;
  SelectionConfig config;
  std::string manifest_hash;
  std::string scheme;
};

namespace detail {

// ceil(p*n) with a relative epsilon so that fractions like 0.05, which are
// not exact binary doubles, do not spill one past the intended count.
inline std::size_t selection_count(double p, std::size_t n) {
  const double x = p * static_cast<double>(n);
  const double eps = 1e-9 * std::max(1.0, x);
  const auto count = static_cast<std::size_t>(std::ceil(x - eps));
  return std::min(std::max<std::size_t>(count, 1), n);
}

}  // namespace detail

// Top-fraction selection: exactly ceil(p*N) samples, highest score first,
// ties ordered by ascending sample_id.
inline SelectionResult select_top(std::vector<ScoredSample> scores, double p,
                                  SelectionConfig config = {}) {
  config.fraction = p;
  config.validate();
  if (scores.empty()) throw config_error("select_top: no scores");
  for (const auto& s : scores)
    if (!std::isfinite(s.score))
      throw data_error("select_top: non-finite score for '" + s.sample_id + "'");
  SelectionResult result;
  result.universe_size = scores.size();
  result.selected_count = detail::selection_count(p, scores.size());
  result.config = config;
  auto better = [](const ScoredSample& a, const ScoredSample& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.sample_id < b.sample_id;
  };
  std::partial_sort(scores.begin(), scores.begin() + result.selected_count,
                    scores.end(), better);
  scores.resize(result.selected_count);
  result.selected = std::move(scores);
  return result;
}

// Overlap |A n B| / |A| between equal-size selections of one universe.
inline double selection_overlap(const SelectionResult& a,
                                const SelectionResult& b) {
  if (a.universe_size != b.universe_size)
    throw config_error("selection_overlap: selections come from different "
                       "universes (" + std::to_string(a.universe_size) +
                       " vs " + std::to_string(b.universe_size) + " samples)");
  if (a.selected.size() != b.selected.size())
    throw config_error("selection_overlap: selections have different sizes");
  if (a.selected.empty()) return 0.0;
  std::unordered_set<std::string> in_a;
  in_a.reserve(a.selected.size());
  for (const auto& s : a.selected) in_a.insert(s.sample_id);
  std::size_t common = 0;
  for (const auto& s : b.selected) common += in_a.count(s.sample_id);
  return static_cast<double>(common) / static_cast<double>(a.selected.size());
}

// Jaccard variant |A n B| / |A u B|; tolerates unequal sizes.
inline double selection_jaccard(const SelectionResult& a,
                                const SelectionResult& b) {
  if (a.universe_size != b.universe_size)
    throw config_error("selection_jaccard: selections come from different "
                       "universes");
  std::unordered_set<std::string> in_a;
  in_a.reserve(a.selected.size());
  for (const auto& s : a.selected) in_a.insert(s.sample_id);
  std::size_t common = 0;
  for (const auto& s : b.selected) common += in_a.count(s.sample_id);
  const std::size_t uni = a.selected.size() + b.selected.size() - common;
  return uni == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(uni);
}

// JSON-lines {rank, sample_id, score}, rank starting at 1.
inline void write_selection_jsonl(const SelectionResult& r,
                                  const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write selection '" + path.string() + "'");
  char buf[32];
  for (std::size_t i = 0; i < r.selected.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.8e", r.selected[i].score);
    out << "{\"rank\":" << (i + 1) << ",\"sample_id\":"
        << nlohmann::json(r.selected[i].sample_id).dump() << ",\"score\":" << buf
        << "}\n";
  }
  if (!out) throw io_error("write to '" + path.string() + "' failed");
}

// Plain id list, one per line, for downstream training pipelines.
inline void write_selection_ids(const SelectionResult& r,
                                const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write id list '" + path.string() + "'");
  for (const auto& s : r.selected) out << s.sample_id << "\n";
  if (!out) throw io_error("write to '" + path.string() + "' failed");
}

// Sidecar echo of the configuration that produced a selection.
inline void write_selection_sidecar(const SelectionResult& r,
                                    const std::filesystem::path& path) {
  nlohmann::json j{
      {"fraction", r.config.fraction},
      {"val_aggregation", to_string(r.config.val_aggregation)},
      {"task_reduction", to_string(r.config.task_reduction)},
      {"tie_break", "by_sample_id"},
      {"selected_count", r.selected_count},
      {"universe_size", r.universe_size},
      {"manifest_hash", r.manifest_hash},
      {"scheme", r.scheme},
  };
  std::ofstream out(path);
  if (!out) throw io_error("cannot write sidecar '" + path.string() + "'");
  out << j.dump(2) << "\n";
  if (!out) throw io_error("write to '" + path.string() + "' failed");
}

}  // namespace qgrad
