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

#include <cmath>
#include <set>
#include <vector>

#include "qgrad/prng.hpp"

using namespace qgrad;

// Reference vectors from the philox4x32-10 known-answer tests published
// with the original generator. Counter words map to (counter, stream) as
// {c0,c1} = counter lo/hi and {c2,c3} = stream lo/hi.
TEST_CASE("philox4x32-10 known answers") {
  {
    const auto out = philox4x32::block(0, 0, 0);
    CHECK(out[0] == 0x6627e8d5u);
    CHECK(out[1] == 0xe169c58du);
    CHECK(out[2] == 0xbc57ac4cu);
    CHECK(out[3] == 0x9b00dbd8u);
  }
  {
    const auto out = philox4x32::block(0xffffffffffffffffull,
                                       0xffffffffffffffffull,
                                       0xffffffffffffffffull);
    CHECK(out[0] == 0x408f276du);
    CHECK(out[1] == 0x41c83b0eu);
    CHECK(out[2] == 0xa20bc7c6u);
    CHECK(out[3] == 0x6d5451fdu);
  }
  {
    // counter = {243f6a88, 85a308d3, 13198a2e, 03707344}, key = {a4093822, 299f31d0}
    const auto out = philox4x32::block(0x299f31d0a4093822ull,
                                       0x85a308d3243f6a88ull,
                                       0x0370734413198a2eull);
    CHECK(out[0] == 0xd16cfe09u);
    CHECK(out[1] == 0x94fdccebu);
    CHECK(out[2] == 0x5001e420u);
    CHECK(out[3] == 0x24126ea1u);
  }
}

TEST_CASE("philox blocks are pure functions of (key, counter, stream)") {
  const auto a = philox4x32::block(7, 1234, 9);
  const auto b = philox4x32::block(7, 1234, 9);
  CHECK(a == b);
  CHECK(philox4x32::block(7, 1234, 9) != philox4x32::block(7, 1235, 9));
  CHECK(philox4x32::block(7, 1234, 9) != philox4x32::block(7, 1234, 10));
  CHECK(philox4x32::block(7, 1234, 9) != philox4x32::block(8, 1234, 9));
}

TEST_CASE("unit floats land in [0,1) and look uniform") {
  double sum = 0.0, sumsq = 0.0;
  constexpr int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto w = philox4x32::block(42, i, 0);
    for (const auto x : w) {
      const float u = unit_float(x);
      REQUIRE(u >= 0.0f);
      REQUIRE(u < 1.0f);
      sum += u;
      sumsq += static_cast<double>(u) * u;
    }
  }
  const double mean = sum / (4.0 * n);
  const double var = sumsq / (4.0 * n) - mean * mean;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(var == doctest::Approx(1.0 / 12.0).epsilon(0.02));
}

TEST_CASE("gaussian moments") {
  double sum = 0.0, sumsq = 0.0, sum4 = 0.0;
  constexpr int n = 50000;
  for (int i = 0; i < n; ++i) {
    const auto g = gaussian4(3, i, 1);
    for (const float x : g) {
      sum += x;
      sumsq += static_cast<double>(x) * x;
      sum4 += std::pow(static_cast<double>(x), 4.0);
    }
  }
  const double mean = sum / (4.0 * n);
  const double var = sumsq / (4.0 * n);
  const double kurt = sum4 / (4.0 * n);
  CHECK(std::fabs(mean) < 0.01);
  CHECK(var == doctest::Approx(1.0).epsilon(0.02));
  CHECK(kurt == doctest::Approx(3.0).epsilon(0.05));  // normal kurtosis
}

TEST_CASE("fill_gaussian is independent of call granularity") {
  std::vector<float> whole(37);
  fill_gaussian(11, 0, 5, whole);
  // same positions produced four at a time
  for (std::size_t j = 0; j < whole.size(); ++j) {
    const auto g = gaussian4(11, j / 4, 5);
    CHECK(whole[j] == g[j % 4]);
  }
}

TEST_CASE("stream packing keeps consumers apart") {
  std::set<std::uint64_t> seen;
  seen.insert(streams::pack(streams::kSynthTrain, 0, 0));
  seen.insert(streams::pack(streams::kSynthTrain, 1, 0));
  seen.insert(streams::pack(streams::kSynthTrain, 0, 1));
  seen.insert(streams::pack(streams::kSynthVal, 0, 0));
  seen.insert(streams::pack(streams::kSynthCentroid, 0, 0));
  CHECK(seen.size() == 5);
}
