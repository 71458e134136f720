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
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "qgrad/error.hpp"

namespace qgrad {

// One fine-tuning checkpoint: its id, the learning rate in effect there,
// and the gradient stores built from it. Store paths are kept as written
// (usually relative to the manifest) plus a resolved absolute form.
struct CheckpointEntry {
  std::string id;
  double eta = 0.0;
  std::string train_store;  // as written in the manifest; may be empty
  std::string val_store;
  std::filesystem::path train_store_resolved;
  std::filesystem::path val_store_resolved;
};

struct CheckpointManifest {
  std::vector<CheckpointEntry> checkpoints;

  void validate() const {
    if (checkpoints.empty())
      throw config_error("manifest: at least one checkpoint required");
    std::set<std::string> ids;
    for (const auto& c : checkpoints) {
      if (c.id.empty()) throw config_error("manifest: empty checkpoint id");
      if (!ids.insert(c.id).second)
        throw config_error("manifest: duplicate checkpoint id '" + c.id + "'");
      if (!(std::isfinite(c.eta) && c.eta > 0.0))
        throw config_error("manifest: checkpoint '" + c.id +
                           "' needs a finite positive eta");
    }
  }

  std::vector<double> etas() const {
    std::vector<double> out;
    out.reserve(checkpoints.size());
    for (const auto& c : checkpoints) out.push_back(c.eta);
    return out;
  }

  double eta_sum() const {
    double s = 0.0;
    for (const auto& c : checkpoints) s += c.eta;
    return s;
  }

  static CheckpointManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw format_error("manifest '" + path.string() +
                         "': invalid JSON: " + e.what());
    }
    if (!j.contains("checkpoints") || !j["checkpoints"].is_array())
      throw format_error("manifest '" + path.string() +
                         "': expected top-level \"checkpoints\" array");
    CheckpointManifest m;
    const auto base = path.has_parent_path() ? path.parent_path()
                                             : std::filesystem::path(".");
    for (const auto& cj : j["checkpoints"]) {
      CheckpointEntry e;
      try {
        e.id = cj.at("id").get<std::string>();
        e.eta = cj.at("eta").get<double>();
      } catch (const nlohmann::json::exception& ex) {
        throw format_error("manifest '" + path.string() +
                           "': checkpoint entry missing id/eta: " + ex.what());
      }
      if (cj.contains("train_store")) e.train_store = cj["train_store"];
      if (cj.contains("val_store")) e.val_store = cj["val_store"];
      if (!e.train_store.empty()) {
        std::filesystem::path p(e.train_store);
        e.train_store_resolved = p.is_absolute() ? p : base / p;
      }
      if (!e.val_store.empty()) {
        std::filesystem::path p(e.val_store);
        e.val_store_resolved = p.is_absolute() ? p : base / p;
      }
      m.checkpoints.push_back(std::move(e));
    }
    m.validate();
    return m;
  }

  void save(const std::filesystem::path& path) const {
    validate();
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : checkpoints) {
      nlohmann::json cj{{"id", c.id}, {"eta", c.eta}};
      if (!c.train_store.empty()) cj["train_store"] = c.train_store;
      if (!c.val_store.empty()) cj["val_store"] = c.val_store;
      arr.push_back(std::move(cj));
    }
    std::ofstream out(path);
    if (!out) throw io_error("cannot write manifest '" + path.string() + "'");
    out << nlohmann::json{{"checkpoints", arr}}.dump(2) << "\n";
    if (!out) throw io_error("write to manifest '" + path.string() + "' failed");
  }
};

}  // namespace qgrad
