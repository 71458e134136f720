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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qgrad/error.hpp"
#include "qgrad/projector.hpp"

namespace qgrad {

// Canonical raw-gradient input: a flat little-endian float32 file holding
// `count` rows of `d` values, described by a JSON sidecar
// {d, count, sample_ids, checkpoint_id}. Default sidecar path: <bin>.json.
struct RawInputInfo {
  std::uint64_t d = 0;
  std::uint64_t count = 0;
  std::vector<std::string> sample_ids;
  std::string checkpoint_id;
};

class RawBinReader {
 public:
  RawBinReader(const std::filesystem::path& bin,
               std::filesystem::path sidecar = {})
      : bin_path_(bin) {
    if (sidecar.empty()) {
      sidecar = bin;
      sidecar += ".json";
    }
    std::ifstream sc(sidecar);
    if (!sc)
      throw io_error("cannot open sidecar '" + sidecar.string() + "' for '" +
                     bin.string() + "'");
    nlohmann::json j;
    try {
      sc >> j;
    } catch (const nlohmann::json::exception& e) {
      throw format_error("sidecar '" + sidecar.string() +
                         "': invalid JSON: " + e.what());
    }
    try {
      info_.d = j.at("d").get<std::uint64_t>();
      info_.count = j.at("count").get<std::uint64_t>();
      info_.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
      info_.checkpoint_id = j.value("checkpoint_id", std::string{});
    } catch (const nlohmann::json::exception& e) {
      throw format_error("sidecar '" + sidecar.string() +
                         "': missing or malformed field: " + e.what());
    }
    if (info_.d == 0) throw data_error("sidecar '" + sidecar.string() + "': d must be positive");
    if (info_.sample_ids.size() != info_.count)
      throw data_error("sidecar '" + sidecar.string() + "': count=" +
                       std::to_string(info_.count) + " but " +
                       std::to_string(info_.sample_ids.size()) + " sample_ids");
    file_ = std::fopen(bin.c_str(), "rb");
    if (!file_)
      throw io_error("cannot open '" + bin.string() +
                     "': " + std::strerror(errno));
    std::fseek(file_, 0, SEEK_END);
    const auto size = static_cast<std::uint64_t>(std::ftell(file_));
    const std::uint64_t expect = info_.count * info_.d * 4;
    if (size != expect)
      throw data_error("'" + bin.string() + "' holds " + std::to_string(size) +
                       " bytes; sidecar implies " + std::to_string(expect) +
                       " (count=" + std::to_string(info_.count) + ", d=" +
                       std::to_string(info_.d) + ")");
  }

  ~RawBinReader() {
    if (file_) std::fclose(file_);
  }

  RawBinReader(const RawBinReader&) = delete;
  RawBinReader& operator=(const RawBinReader&) = delete;

  const RawInputInfo& info() const noexcept { return info_; }

  // Reads rows [start, start+n) into `out` (n x d floats) and rejects
  // non-finite values.
  void read_batch(std::uint64_t start, std::size_t n, float* out) {
    if (start + n > info_.count)
      throw data_error("read past end of '" + bin_path_.string() + "'");
    if (std::fseek(file_, static_cast<long>(start * info_.d * 4), SEEK_SET) != 0)
      throw io_error("seek in '" + bin_path_.string() + "' failed");
    const std::size_t want = n * info_.d;
    if (std::fread(out, 4, want, file_) != want)
      throw io_error("short read from '" + bin_path_.string() + "'");
    for (std::size_t i = 0; i < want; ++i)
      if (!std::isfinite(out[i]))
        throw data_error("non-finite gradient value in '" +
                         info_.sample_ids[start + i / info_.d] + "' (" +
                         bin_path_.string() + ")");
  }

 private:
  std::filesystem::path bin_path_;
  RawInputInfo info_;
  std::FILE* file_ = nullptr;
};

// JSON-lines alternative: one {"sample_id": ..., "values": [...]} per line.
// All records must share one length; the checkpoint id comes from the
// caller (a flag, for the CLI).
inline std::vector<RawGradientRecord> read_jsonl_records(
    const std::filesystem::path& path, const std::string& checkpoint_id = {}) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  std::vector<RawGradientRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw format_error("'" + path.string() + "' line " +
                         std::to_string(lineno) + ": invalid JSON: " + e.what());
    }
    RawGradientRecord rec;
    rec.checkpoint_id = checkpoint_id;
    try {
      rec.sample_id = j.at("sample_id").get<std::string>();
      rec.values = j.at("values").get<std::vector<float>>();
    } catch (const nlohmann::json::exception& e) {
      throw format_error("'" + path.string() + "' line " +
                         std::to_string(lineno) +
                         ": expected {sample_id, values}: " + e.what());
    }
    if (!records.empty() && rec.values.size() != records.front().values.size())
      throw dimension_error("'" + path.string() + "' line " +
                            std::to_string(lineno) + ": record '" +
                            rec.sample_id + "' has length " +
                            std::to_string(rec.values.size()) + ", expected " +
                            std::to_string(records.front().values.size()));
    for (float x : rec.values)
      if (!std::isfinite(x))
        throw data_error("non-finite gradient value in '" + rec.sample_id +
                         "' (" + path.string() + ")");
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace qgrad
