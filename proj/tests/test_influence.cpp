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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "qgrad/influence.hpp"
#include "qgrad/prng.hpp"
#include "qgrad/quantizer.hpp"

using namespace qgrad;

namespace {

CheckpointManifest make_manifest(const std::vector<double>& etas) {
  CheckpointManifest m;
  for (std::size_t i = 0; i < etas.size(); ++i)
    m.checkpoints.push_back({"cp" + std::to_string(i + 1), etas[i], "", "", {}, {}});
  return m;
}

QuantizedVector codes_vector(std::vector<std::int8_t> codes,
                             QuantScheme scheme = {QuantMethod::absmax, 8},
                             float scale = 1.0f) {
  QuantizedVector qv;
  qv.scheme = scheme;
  qv.scale = scale;
  qv.codes = std::move(codes);
  return qv;
}

// n x k gaussian rows as an fp32 set with ids "<prefix><i>"
VectorSet gaussian_set(std::uint64_t seed, std::size_t n, std::uint32_t k,
                       const std::string& prefix) {
  std::vector<float> data(n * k);
  fill_gaussian(seed, 0, 60, data);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%04zu", prefix.c_str(), i);
    ids[i] = buf;
  }
  return VectorSet::from_fp32(std::move(ids), std::move(data), k);
}

std::vector<const VectorSet*> views(const std::vector<VectorSet>& sets) {
  std::vector<const VectorSet*> out;
  for (const auto& s : sets) out.push_back(&s);
  return out;
}

std::vector<std::size_t> ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

}  // namespace

TEST_CASE("normalize_codes returns the unit code direction") {
  const auto unit = normalize_codes(codes_vector({3, 4}));
  CHECK(unit[0] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(unit[1] == doctest::Approx(0.8).epsilon(1e-6));
  double norm = 0;
  for (float x : unit) norm += static_cast<double>(x) * x;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("normalization ignores the stored scale entirely") {
  // codes direction == dequantized direction for any S > 0
  for (const float scale : {0.01f, 1.0f, 73.5f}) {
    auto qv = codes_vector({1, -1, 0}, {QuantMethod::absmax, 2}, scale);
    const auto unit = normalize_codes(qv);
    const auto deq = dequantize(qv);
    double dn = 0;
    for (float x : deq) dn += static_cast<double>(x) * x;
    dn = std::sqrt(dn);
    for (std::size_t m = 0; m < unit.size(); ++m)
      CHECK(unit[m] == doctest::Approx(deq[m] / dn).epsilon(1e-6));
  }
}

TEST_CASE("all-zero codes: throw by default, sentinel via try_") {
  const auto qv = codes_vector({0, 0, 0});
  CHECK_THROWS_AS(normalize_codes(qv), degenerate_error);
  CHECK_FALSE(try_normalize_codes(qv).has_value());
  CHECK(try_normalize_codes(codes_vector({0, 2, 0})).has_value());
}

TEST_CASE("pair influence on hand-worked series") {
  {
    // identical directions, one checkpoint: exactly eta
    GradientSeries train{"t", {codes_vector({5, -3, 2})}, {}};
    GradientSeries val{"v", {codes_vector({5, -3, 2})}, {}};
    const auto m = make_manifest({0.01});
    CHECK(pair_influence(train, val, m) == doctest::Approx(0.01).epsilon(1e-12));
  }
  {
    // orthogonal codes: zero for any eta
    GradientSeries train{"t", {codes_vector({1, 0})}, {}};
    GradientSeries val{"v", {codes_vector({0, 1})}, {}};
    CHECK(pair_influence(train, val, make_manifest({123.0})) == 0.0);
  }
  {
    // cosines (1, -1) under etas (2e-5, 1e-5)
    GradientSeries train{"t", {codes_vector({1, 0}), codes_vector({1, 0})}, {}};
    GradientSeries val{"v", {codes_vector({1, 0}), codes_vector({-1, 0})}, {}};
    CHECK(pair_influence(train, val, make_manifest({2e-5, 1e-5})) ==
          doctest::Approx(1e-5).epsilon(1e-9));
  }
}

TEST_CASE("pair influence stays within the learning-rate budget") {
  const auto m = make_manifest({3e-5, 2e-5, 1e-5});
  const double budget = 6e-5;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    GradientSeries train{"t", {}, {}}, val{"v", {}, {}};
    for (int cp = 0; cp < 3; ++cp) {
      std::vector<float> a(33), b(33);
      fill_gaussian(seed, cp * 32, 61, a);
      fill_gaussian(seed, cp * 32, 62, b);
      train.quant.push_back(quantize(a, {QuantMethod::absmax, 8}));
      val.quant.push_back(quantize(b, {QuantMethod::absmax, 8}));
    }
    CHECK(std::fabs(pair_influence(train, val, m)) <= budget * (1 + 1e-12));
  }
  // equality when every checkpoint cosine is +1
  GradientSeries same{"t", {}, {}};
  for (int cp = 0; cp < 3; ++cp) same.quant.push_back(codes_vector({2, -7, 1}));
  CHECK(pair_influence(same, same, m) == doctest::Approx(budget).epsilon(1e-12));
}

TEST_CASE("alignment and scheme mismatches are rejected") {
  const auto m = make_manifest({1e-5, 2e-5});
  GradientSeries two{"t", {codes_vector({1}), codes_vector({1})}, {}};
  GradientSeries one{"v", {codes_vector({1})}, {}};
  CHECK_THROWS_AS(pair_influence(two, one, m), alignment_error);
  GradientSeries wrong_cp{"v", {codes_vector({1}), codes_vector({1})}, {}};
  wrong_cp.quant[0].checkpoint_id = "cpX";
  CHECK_THROWS_AS(pair_influence(two, wrong_cp, m), alignment_error);
  GradientSeries fp{"v", {}, {{1.0f}, {1.0f}}};
  CHECK_THROWS_AS(pair_influence(two, fp, m), data_error);
  GradientSeries mixed{"v",
                       {codes_vector({1}, {QuantMethod::absmax, 4}),
                        codes_vector({1}, {QuantMethod::absmax, 4})},
                       {}};
  CHECK_THROWS_AS(pair_influence(two, mixed, m), data_error);
}

TEST_CASE("degenerate pairs follow the policy") {
  const auto m = make_manifest({1e-5});
  GradientSeries train{"t", {codes_vector({0, 0})}, {}};
  GradientSeries val{"v", {codes_vector({1, 1})}, {}};
  CHECK(pair_influence(train, val, m, DegeneratePolicy::skip) == 0.0);
  CHECK_THROWS_AS(pair_influence(train, val, m, DegeneratePolicy::error),
                  degenerate_error);
}

TEST_CASE("tracin influence is the raw weighted dot product") {
  const auto m = make_manifest({1.0});
  GradientSeries train{"t", {}, {{1.0f, 2.0f}}};
  GradientSeries val{"v", {}, {{3.0f, 4.0f}}};
  CHECK(tracin_influence(train, val, m) == doctest::Approx(11.0).epsilon(1e-12));
  GradientSeries zero{"z", {}, {{0.0f, 0.0f}}};
  CHECK(tracin_influence(train, zero, m) == 0.0);
  // equals normalized influence times both norms at N=1, eta=1
  GradientSeries qt{"t", {quantize(std::vector<float>{1.0f, 2.0f},
                                   {QuantMethod::absmax, 8})}, {}};
  GradientSeries qv{"v", {quantize(std::vector<float>{3.0f, 4.0f},
                                   {QuantMethod::absmax, 8})}, {}};
  const double cos_part = pair_influence(qt, qv, m);
  const double norms = std::sqrt(5.0) * 5.0;
  CHECK(tracin_influence(train, val, m) ==
        doctest::Approx(cos_part * norms).epsilon(0.01));  // 8-bit rounding
  CHECK_THROWS_AS(tracin_influence(qt, qv, m), data_error);
}

TEST_CASE("score_sets on a single pair equals pair_influence") {
  const auto m = make_manifest({2e-5, 1e-5});
  std::vector<VectorSet> train_sets, val_sets;
  GradientSeries ts{"t0000", {}, {}}, vs{"v0000", {}, {}};
  for (int cp = 0; cp < 2; ++cp) {
    auto t = gaussian_set(cp + 1, 1, 64, "t");
    auto v = gaussian_set(cp + 11, 1, 64, "v");
    auto tq = quantize_set(t, {QuantMethod::absmax, 8});
    auto vq = quantize_set(v, {QuantMethod::absmax, 8});
    ts.quant.push_back(tq.quantized_at(0));
    vs.quant.push_back(vq.quantized_at(0));
    train_sets.push_back(std::move(tq));
    val_sets.push_back(std::move(vq));
  }
  const ScoreTable table =
      score_sets(views(train_sets), views(val_sets), m.etas(), ScoreMode::qless);
  REQUIRE(table.train_ids.size() == 1);
  REQUIRE(table.tasks.size() == 1);
  CHECK(table.tasks[0] == "default");
  CHECK(table.at(0, 0) ==
        doctest::Approx(pair_influence(ts, vs, m)).epsilon(1e-12));
}

TEST_CASE("duplicating validation samples leaves mean-aggregated scores intact") {
  const std::vector<double> etas{1e-5};
  auto train = gaussian_set(3, 20, 32, "t");

  {
    // single validation sample duplicated: mean(x, x) == x
    auto val = gaussian_set(4, 1, 32, "v");
    VectorSet val_dup = val;
    val_dup.ids.push_back("vdup");
    val_dup.fp.insert(val_dup.fp.end(), val.fp.begin(), val.fp.begin() + 32);
    val_dup.scales.push_back(1.0f);
    val_dup.degenerate.push_back(0);
    val_dup.norms.push_back(val.norms[0]);
    std::vector<VectorSet> ts{train}, vs{val}, vs2{val_dup};
    const auto base = score_sets(views(ts), views(vs), etas, ScoreMode::less_fp);
    const auto dup = score_sets(views(ts), views(vs2), etas, ScoreMode::less_fp);
    for (std::size_t r = 0; r < base.train_ids.size(); ++r)
      CHECK(dup.at(r, 0) == doctest::Approx(base.at(r, 0)).epsilon(1e-12));
  }
  {
    // whole-set duplication is idempotent for any task size
    auto val = gaussian_set(4, 5, 32, "v");
    VectorSet val_all2 = val;
    for (std::size_t i = 0; i < val.size(); ++i) {
      val_all2.ids.push_back(val.ids[i] + "_b");
      val_all2.fp.insert(val_all2.fp.end(), val.fp.begin() + i * 32,
                         val.fp.begin() + (i + 1) * 32);
      val_all2.scales.push_back(1.0f);
      val_all2.degenerate.push_back(0);
      val_all2.norms.push_back(val.norms[i]);
    }
    std::vector<VectorSet> ts{train}, vs{val}, vs3{val_all2};
    const auto base = score_sets(views(ts), views(vs), etas, ScoreMode::less_fp);
    const auto doubled =
        score_sets(views(ts), views(vs3), etas, ScoreMode::less_fp);
    for (std::size_t r = 0; r < base.train_ids.size(); ++r)
      CHECK(doubled.at(r, 0) == doctest::Approx(base.at(r, 0)).epsilon(1e-12));
  }
}

TEST_CASE("stored scales cancel out of qless scores") {
  const std::vector<double> etas{2e-5, 1e-5};
  std::vector<VectorSet> train_sets, val_sets;
  for (int cp = 0; cp < 2; ++cp) {
    train_sets.push_back(
        quantize_set(gaussian_set(cp + 21, 30, 48, "t"), {QuantMethod::absmax, 4}));
    val_sets.push_back(
        quantize_set(gaussian_set(cp + 31, 6, 48, "v"), {QuantMethod::absmax, 4}));
  }
  const auto base =
      score_sets(views(train_sets), views(val_sets), etas, ScoreMode::qless);
  for (auto& s : train_sets)
    for (auto& scale : s.scales) scale *= 37.5f;
  for (auto& s : val_sets)
    for (auto& scale : s.scales) scale *= 0.004f;
  const auto rescaled =
      score_sets(views(train_sets), views(val_sets), etas, ScoreMode::qless);
  CHECK(base.values == rescaled.values);
}

TEST_CASE("uniform eta scaling rescales scores and preserves the ranking") {
  std::vector<double> etas{2e-5, 1e-5, 5e-6};
  std::vector<VectorSet> train_sets, val_sets;
  for (int cp = 0; cp < 3; ++cp) {
    train_sets.push_back(
        quantize_set(gaussian_set(cp + 41, 50, 32, "t"), {QuantMethod::absmax, 8}));
    val_sets.push_back(
        quantize_set(gaussian_set(cp + 51, 4, 32, "v"), {QuantMethod::absmax, 8}));
  }
  const auto base =
      score_sets(views(train_sets), views(val_sets), etas, ScoreMode::qless);
  for (auto& e : etas) e *= 3.0;
  const auto scaled =
      score_sets(views(train_sets), views(val_sets), etas, ScoreMode::qless);
  for (std::size_t i = 0; i < base.values.size(); ++i)
    CHECK(scaled.values[i] == doctest::Approx(3.0 * base.values[i]).epsilon(1e-12));
  CHECK(ranking(base.values) == ranking(scaled.values));
}

TEST_CASE("8-bit cosines track full precision within 2% of the eta budget") {
  const std::vector<double> etas{2e-5, 1e-5};
  const double budget = 3e-5;
  std::vector<VectorSet> fp_t, fp_v, q_t, q_v;
  for (int cp = 0; cp < 2; ++cp) {
    fp_t.push_back(gaussian_set(cp + 61, 40, 512, "t"));
    fp_v.push_back(gaussian_set(cp + 71, 8, 512, "v"));
    q_t.push_back(quantize_set(fp_t.back(), {QuantMethod::absmax, 8}));
    q_v.push_back(quantize_set(fp_v.back(), {QuantMethod::absmax, 8}));
  }
  ScoreOptions options;
  options.val_agg = ValAggregation::sum;  // per-pair comparison, no averaging
  const auto fp_scores =
      score_sets(views(fp_t), views(fp_v), etas, ScoreMode::less_fp, options);
  const auto q_scores =
      score_sets(views(q_t), views(q_v), etas, ScoreMode::qless, options);
  // single default task column holds the sum over 8 vals; compare per-pair
  // via one-val runs instead
  for (std::size_t v = 0; v < 8; ++v) {
    std::vector<VectorSet> one_fp, one_q;
    for (int cp = 0; cp < 2; ++cp) {
      VectorSet fv = fp_v[cp], qv = q_v[cp];
      auto shrink = [&](VectorSet& s) {
        s.ids = {s.ids[v]};
        if (!s.fp.empty())
          s.fp.assign(s.fp.begin() + v * s.k, s.fp.begin() + (v + 1) * s.k);
        if (!s.codes.empty())
          s.codes.assign(s.codes.begin() + v * s.k,
                         s.codes.begin() + (v + 1) * s.k);
        s.scales = {s.scales[v]};
        s.degenerate = {s.degenerate[v]};
        s.norms = {s.norms[v]};
      };
      shrink(fv);
      shrink(qv);
      one_fp.push_back(std::move(fv));
      one_q.push_back(std::move(qv));
    }
    const auto f = score_sets(views(fp_t), views(one_fp), etas, ScoreMode::less_fp);
    const auto q = score_sets(views(q_t), views(one_q), etas, ScoreMode::qless);
    for (std::size_t r = 0; r < f.train_ids.size(); ++r)
      CHECK(std::fabs(f.at(r, 0) - q.at(r, 0)) <= 0.02 * budget);
  }
  CHECK(fp_scores.train_ids == q_scores.train_ids);
}

TEST_CASE("qless at 8 bits ranks like full precision (100 x 10)") {
  const std::vector<double> etas{2e-5, 1e-5};
  std::vector<VectorSet> fp_t, fp_v, q_t, q_v;
  for (int cp = 0; cp < 2; ++cp) {
    fp_t.push_back(gaussian_set(cp + 81, 100, 256, "t"));
    fp_v.push_back(gaussian_set(cp + 91, 10, 256, "v"));
    q_t.push_back(quantize_set(fp_t.back(), {QuantMethod::absmax, 8}));
    q_v.push_back(quantize_set(fp_v.back(), {QuantMethod::absmax, 8}));
  }
  const auto f = score_sets(views(fp_t), views(fp_v), etas, ScoreMode::less_fp);
  const auto q = score_sets(views(q_t), views(q_v), etas, ScoreMode::qless);
  // spearman of the single aggregated column
  std::vector<double> fcol(100), qcol(100);
  for (std::size_t r = 0; r < 100; ++r) {
    fcol[r] = f.at(r, 0);
    qcol[r] = q.at(r, 0);
  }
  std::vector<std::size_t> forder = ranking(fcol), qorder = ranking(qcol);
  double rank_corr;
  {
    // spearman via ranks
    std::vector<double> fr(100), qr(100);
    for (std::size_t i = 0; i < 100; ++i) {
      fr[forder[i]] = static_cast<double>(i);
      qr[qorder[i]] = static_cast<double>(i);
    }
    double mf = 49.5, sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < 100; ++i) {
      sxy += (fr[i] - mf) * (qr[i] - mf);
      sxx += (fr[i] - mf) * (fr[i] - mf);
      syy += (qr[i] - mf) * (qr[i] - mf);
    }
    rank_corr = sxy / std::sqrt(sxx * syy);
  }
  CHECK(rank_corr >= 0.95);
}

TEST_CASE("thread count never changes the table") {
  const std::vector<double> etas{2e-5, 1e-5};
  std::vector<VectorSet> train_sets, val_sets;
  for (int cp = 0; cp < 2; ++cp) {
    train_sets.push_back(
        quantize_set(gaussian_set(cp + 101, 101, 96, "t"), {QuantMethod::sign, 1}));
    val_sets.push_back(
        quantize_set(gaussian_set(cp + 111, 7, 96, "v"), {QuantMethod::sign, 1}));
  }
  ScoreOptions one, many;
  one.threads = 1;
  many.threads = 8;
  const auto a =
      score_sets(views(train_sets), views(val_sets), etas, ScoreMode::qless, one);
  const auto b =
      score_sets(views(train_sets), views(val_sets), etas, ScoreMode::qless, many);
  CHECK(a.values == b.values);
  CHECK(a.train_ids == b.train_ids);
}

TEST_CASE("missing samples at a checkpoint raise a coverage error naming them") {
  const std::vector<double> etas{1e-5, 1e-5};
  auto t1 = quantize_set(gaussian_set(121, 5, 16, "t"), {QuantMethod::absmax, 8});
  auto t2 = t1;
  // drop "t0003" from the second checkpoint
  t2.ids.erase(t2.ids.begin() + 3);
  t2.codes.erase(t2.codes.begin() + 3 * 16, t2.codes.begin() + 4 * 16);
  t2.scales.erase(t2.scales.begin() + 3);
  t2.degenerate.erase(t2.degenerate.begin() + 3);
  t2.norms.erase(t2.norms.begin() + 3);
  auto v = quantize_set(gaussian_set(131, 2, 16, "v"), {QuantMethod::absmax, 8});
  std::vector<VectorSet> ts{t1, t2}, vs{v, v};
  try {
    score_sets(views(ts), views(vs), etas, ScoreMode::qless);
    FAIL("expected coverage_error");
  } catch (const coverage_error& e) {
    CHECK(std::string(e.what()).find("t0003") != std::string::npos);
  }
}

TEST_CASE("mode and scheme requirements are enforced") {
  const std::vector<double> etas{1e-5};
  std::vector<VectorSet> fp{gaussian_set(141, 3, 8, "t")};
  std::vector<VectorSet> q{
      quantize_set(gaussian_set(151, 3, 8, "t"), {QuantMethod::absmax, 8})};
  std::vector<VectorSet> q4{
      quantize_set(gaussian_set(151, 3, 8, "t"), {QuantMethod::absmax, 4})};
  CHECK_THROWS_AS(score_sets(views(fp), views(fp), etas, ScoreMode::qless),
                  scheme_error);
  CHECK_THROWS_AS(score_sets(views(q), views(q), etas, ScoreMode::less_fp),
                  scheme_error);
  CHECK_THROWS_AS(score_sets(views(q), views(q), etas, ScoreMode::tracin),
                  scheme_error);
  CHECK_THROWS_AS(score_sets(views(q), views(q4), etas, ScoreMode::qless),
                  scheme_error);
}

TEST_CASE("score tables roundtrip through CSV and the binary cache") {
  ScoreTable t;
  t.train_ids = {"a", "b", "c"};
  t.tasks = {"task0", "task1"};
  t.values = {1.25e-5, -3.5e-7, 0.0, 9.875e-4, 2.0, -1.0};
  t.mode = "qless";
  t.scheme = "absmax8";
  t.manifest_hash = "deadbeef00000000";
  const auto dir = std::filesystem::temp_directory_path();
  const auto csv = dir / "qgrad_scores_test.csv";
  const auto bin = dir / "qgrad_scores_test.bin";
  t.write_csv(csv);
  t.write_binary(bin);
  const auto from_csv = ScoreTable::read_csv(csv);
  CHECK(from_csv.train_ids == t.train_ids);
  CHECK(from_csv.tasks == t.tasks);
  for (std::size_t i = 0; i < t.values.size(); ++i)
    CHECK(from_csv.values[i] ==
          doctest::Approx(t.values[i]).epsilon(1e-8));  // 9 significant digits
  const auto from_bin = ScoreTable::read_binary(bin);
  CHECK(from_bin.values == t.values);  // exact
  CHECK(from_bin.manifest_hash == t.manifest_hash);
  CHECK(from_bin.scheme == t.scheme);
  std::filesystem::remove(csv);
  std::filesystem::remove(bin);
}
