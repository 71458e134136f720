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
//
// qgrad: batch CLI over the gradient datastore pipeline.
// Exit codes: 0 success, 2 usage or data error, 3 I/O error.

#include <chrono>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qgrad/error.hpp"
#include "qgrad/gradient_io.hpp"
#include "qgrad/influence.hpp"
#include "qgrad/log.hpp"
#include "qgrad/manifest.hpp"
#include "qgrad/parallel.hpp"
#include "qgrad/prng.hpp"
#include "qgrad/projector.hpp"
#include "qgrad/quantizer.hpp"
#include "qgrad/selector.hpp"
#include "qgrad/store.hpp"
#include "qgrad/synth.hpp"
#include "qgrad/version.hpp"

namespace fs = std::filesystem;
using namespace qgrad;

namespace {

std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t hash_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "' for hashing");
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

void provenance_line(const std::string& cmd, std::uint64_t seed, int argc,
                     char** argv) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int i = 1; i < argc; ++i)
    h = fnv1a64(argv[i], std::strlen(argv[i]) + 1, h);
  std::fprintf(stderr, "qgrad %s cmd=%s seed=%" PRIu64 " config=%016" PRIx64 "\n",
               kVersionString, cmd.c_str(), seed, h);
}

QuantScheme parse_scheme_name(const std::string& name) {
  // "absmax8", "absmean2", "sign1", ...
  std::size_t split = name.size();
  while (split > 0 && std::isdigit(static_cast<unsigned char>(name[split - 1])))
    --split;
  if (split == 0 || split == name.size())
    throw config_error("cannot parse scheme '" + name +
                       "'; expected e.g. absmax8 or sign1");
  QuantScheme s;
  s.method = quant_method_from_string(name.substr(0, split));
  s.bits = static_cast<std::uint8_t>(std::stoi(name.substr(split)));
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------

struct ProjectArgs {
  std::string input;
  std::string format = "auto";
  std::string sidecar;
  std::string out;
  std::uint64_t seed = 0;
  std::uint32_t dim_out = 8192;
  std::string dist = "rademacher";
  std::string checkpoint_id;
  std::string manifest_out;
  std::string role = "train";
  double eta = 0.0;
  std::size_t block_cols = 256;
  int threads = 0;
};

void update_manifest(const std::string& manifest_out, const std::string& role,
                     double eta, const fs::path& store_path,
                     const std::string& checkpoint_id) {
  const fs::path manifest_path(manifest_out);
  CheckpointManifest manifest;
  if (fs::exists(manifest_path)) manifest = CheckpointManifest::load(manifest_path);
  const fs::path base = manifest_path.has_parent_path()
                            ? manifest_path.parent_path()
                            : fs::path(".");
  std::string rel = fs::relative(fs::absolute(store_path), fs::absolute(base))
                        .generic_string();
  CheckpointEntry* entry = nullptr;
  for (auto& c : manifest.checkpoints)
    if (c.id == checkpoint_id) entry = &c;
  if (!entry) {
    manifest.checkpoints.push_back({});
    entry = &manifest.checkpoints.back();
    entry->id = checkpoint_id;
  }
  if (eta > 0.0) entry->eta = eta;
  if (entry->eta <= 0.0)
    throw config_error("--manifest-out needs --eta for new checkpoint '" +
                       checkpoint_id + "'");
  if (role == "train")
    entry->train_store = rel;
  else if (role == "val")
    entry->val_store = rel;
  else
    throw config_error("--role must be train or val, got '" + role + "'");
  manifest.save(manifest_path);
}

int cmd_project(const ProjectArgs& args) {
  const fs::path out_path(args.out);
  std::string checkpoint_id = args.checkpoint_id;

  std::string format = args.format;
  if (format == "auto")
    format = fs::path(args.input).extension() == ".jsonl" ? "jsonl" : "bin";

  const auto project_spec = [&](std::uint64_t d) {
    ProjectionSpec spec;
    spec.seed = args.seed;
    spec.input_dim = d;
    spec.output_dim = args.dim_out;
    spec.dist = distribution_from_string(args.dist);
    spec.validate();
    return spec;
  };

  WriteSummary summary;
  if (format == "bin") {
    RawBinReader reader(args.input, args.sidecar.empty()
                                        ? fs::path()
                                        : fs::path(args.sidecar));
    const RawInputInfo& info = reader.info();
    if (checkpoint_id.empty()) checkpoint_id = info.checkpoint_id;
    const ProjectionSpec spec = project_spec(info.d);
    Projector projector(spec, args.block_cols);
    StoreWriter writer(out_path,
                       StoreHeader{QuantMethod::fp32, 32, args.dim_out,
                                   checkpoint_id});
    const std::size_t k = args.dim_out;
    // chunk rows by a ~512 MiB input budget so huge d still streams
    const std::size_t chunk = std::max<std::size_t>(
        1, std::min<std::uint64_t>(256, (512ull << 20) / (info.d * 4)));
    std::vector<float> raw(chunk * info.d);
    std::vector<float> projected(chunk * k);
    for (std::uint64_t start = 0; start < info.count; start += chunk) {
      const std::size_t n =
          static_cast<std::size_t>(std::min<std::uint64_t>(chunk, info.count - start));
      reader.read_batch(start, n, raw.data());
      projector.project_many(raw.data(), n, projected.data(), args.threads);
      for (std::size_t i = 0; i < n; ++i) {
        const float* row = projected.data() + i * k;
        bool zero = true;
        for (std::size_t m = 0; m < k && zero; ++m) zero = row[m] == 0.0f;
        writer.append_fp32(info.sample_ids[start + i], {row, k}, zero);
      }
    }
    if (info.count == 0)
      log::warn("input '" + args.input + "' holds no records; writing an "
                "empty store");
    summary = writer.finalize();
  } else if (format == "jsonl") {
    const auto records = read_jsonl_records(args.input, checkpoint_id);
    StoreWriter writer(out_path,
                       StoreHeader{QuantMethod::fp32, 32, args.dim_out,
                                   checkpoint_id});
    if (records.empty()) {
      log::warn("input '" + args.input + "' holds no records; writing an "
                "empty store");
    } else {
      const ProjectionSpec spec = project_spec(records.front().values.size());
      Projector projector(spec, args.block_cols);
      std::vector<float> row(args.dim_out);
      for (const auto& rec : records) {
        projector.project(rec.values, row);
        bool zero = true;
        for (float x : row)
          if (x != 0.0f) {
            zero = false;
            break;
          }
        writer.append_fp32(rec.sample_id, row, zero);
      }
    }
    summary = writer.finalize();
  } else {
    throw config_error("--format must be auto, bin or jsonl");
  }

  std::printf("projected %" PRIu64 " vector(s) -> %s (%" PRIu64 " bytes)\n",
              summary.count, args.out.c_str(), summary.bytes);
  if (!args.manifest_out.empty())
    update_manifest(args.manifest_out, args.role, args.eta, out_path,
                    checkpoint_id);
  return 0;
}

// ---------------------------------------------------------------------------

struct QuantizeArgs {
  std::string input;
  std::string scheme = "absmax";
  std::uint8_t bits = 8;
  std::string out;
  std::string manifest_out;
  std::string role = "train";
  double eta = 0.0;
};

int cmd_quantize(const QuantizeArgs& args) {
  QuantScheme scheme{quant_method_from_string(args.scheme), args.bits};
  scheme.validate();
  StoreReader reader{fs::path(args.input)};
  if (reader.header().method != QuantMethod::fp32)
    throw data_error("input store '" + args.input +
                     "' is already quantized (" +
                     reader.header().scheme().name() +
                     "); quantize expects an fp32 store");
  StoreWriter writer(fs::path(args.out),
                     StoreHeader{scheme.method, scheme.bits, reader.header().k,
                                 reader.header().checkpoint_id});
  for (std::uint64_t i = 0; i < reader.count(); ++i) {
    const auto v = reader.read_fp32_at(i);
    writer.append(quantize(v, scheme, reader.sample_ids()[i],
                           reader.header().checkpoint_id));
  }
  const WriteSummary summary = writer.finalize();
  std::printf("quantized %" PRIu64 " vector(s) as %s -> %s (%" PRIu64 " bytes)\n",
              summary.count, scheme.name().c_str(), args.out.c_str(),
              summary.bytes);
  if (!args.manifest_out.empty())
    update_manifest(args.manifest_out, args.role, args.eta, fs::path(args.out),
                    reader.header().checkpoint_id);
  return 0;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string train_manifest;
  std::string val_manifest;
  std::string mode = "qless";
  std::string out;
  std::string binary_out;
  std::string val_aggregation = "mean";
  std::string degenerate = "skip";
  int threads = 0;
};

int cmd_score(const ScoreArgs& args) {
  const CheckpointManifest train = CheckpointManifest::load(args.train_manifest);
  const CheckpointManifest val = CheckpointManifest::load(args.val_manifest);
  if (train.checkpoints.size() != val.checkpoints.size())
    throw alignment_error("train manifest has " +
                          std::to_string(train.checkpoints.size()) +
                          " checkpoints, val manifest has " +
                          std::to_string(val.checkpoints.size()));
  CheckpointManifest merged;
  for (std::size_t i = 0; i < train.checkpoints.size(); ++i) {
    const auto& t = train.checkpoints[i];
    const auto& v = val.checkpoints[i];
    if (t.id != v.id || t.eta != v.eta)
      throw alignment_error("checkpoint " + std::to_string(i) +
                            " differs between manifests: ('" + t.id + "', " +
                            std::to_string(t.eta) + ") vs ('" + v.id + "', " +
                            std::to_string(v.eta) + ")");
    CheckpointEntry e = t;
    e.val_store = v.val_store;
    e.val_store_resolved = v.val_store_resolved;
    merged.checkpoints.push_back(std::move(e));
  }

  ScoreOptions options;
  options.val_agg = val_aggregation_from_string(args.val_aggregation);
  options.degenerate = degenerate_policy_from_string(args.degenerate);
  options.threads = args.threads;

  ScoreTable table = score_all(merged, score_mode_from_string(args.mode), options);
  char hash[20];
  const std::uint64_t val_hash = hash_file(args.val_manifest);
  std::snprintf(hash, sizeof hash, "%016" PRIx64,
                fnv1a64(&val_hash, 8, hash_file(args.train_manifest)));
  table.manifest_hash = hash;
  table.write_csv(args.out);
  {
    nlohmann::json meta{{"mode", table.mode},
                        {"scheme", table.scheme},
                        {"manifest_hash", table.manifest_hash},
                        {"val_aggregation", table.val_aggregation}};
    std::ofstream mf(args.out + ".meta.json");
    if (mf) mf << meta.dump(2) << "\n";
  }
  if (!args.binary_out.empty()) table.write_binary(args.binary_out);
  std::printf("scored %zu train sample(s) x %zu task(s) -> %s\n",
              table.train_ids.size(), table.tasks.size(), args.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SelectArgs {
  std::string scores;
  double fraction = 0.05;
  std::string out;
  std::string ids_out;
  std::string config_out;
  std::string task_reduction = "max";
};

int cmd_select(const SelectArgs& args) {
  ScoreTable table;
  {
    std::ifstream probe(args.scores, std::ios::binary);
    if (!probe) throw io_error("cannot open scores '" + args.scores + "'");
    char magic[8] = {};
    probe.read(magic, 8);
    probe.close();
    table = std::memcmp(magic, "QGSCOREB", 8) == 0
                ? ScoreTable::read_binary(args.scores)
                : ScoreTable::read_csv(args.scores);
  }
  if (table.manifest_hash.empty()) {
    // CSV path: provenance travels in the meta sidecar when present
    std::ifstream mf(args.scores + ".meta.json");
    if (mf) {
      nlohmann::json meta;
      mf >> meta;
      table.mode = meta.value("mode", table.mode);
      table.scheme = meta.value("scheme", table.scheme);
      table.manifest_hash = meta.value("manifest_hash", "");
      table.val_aggregation = meta.value("val_aggregation", table.val_aggregation);
    }
  }
  SelectionConfig config;
  config.fraction = args.fraction;
  config.task_reduction = task_reduction_from_string(args.task_reduction);
  config.val_aggregation = val_aggregation_from_string(
      table.val_aggregation.empty() ? "mean" : table.val_aggregation);
  config.validate();

  SelectionResult result =
      select_top(aggregate(table, config.task_reduction), args.fraction, config);
  result.manifest_hash = table.manifest_hash;
  result.scheme = table.scheme;
  write_selection_jsonl(result, args.out);
  if (!args.ids_out.empty()) write_selection_ids(result, args.ids_out);
  write_selection_sidecar(result, args.config_out.empty()
                                      ? fs::path(args.out + ".config.json")
                                      : fs::path(args.config_out));
  std::printf("selected %zu of %zu sample(s) -> %s\n", result.selected.size(),
              result.universe_size, args.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string store;
  std::string out;
  std::string histogram_out;
};

int cmd_analyze(const AnalyzeArgs& args) {
  StoreReader reader{fs::path(args.store)};
  const StoreHeader& header = reader.header();
  if (header.method == QuantMethod::fp32)
    throw data_error("analyze expects a quantized store; '" + args.store +
                     "' holds fp32 vectors");
  std::vector<std::uint64_t> histogram(255, 0);  // code -127..127 -> idx+127
  std::uint64_t zeros = 0, total = 0, degenerate = 0;
  for (std::uint64_t i = 0; i < reader.count(); ++i) {
    const auto qv = reader.read_at(i);
    if (qv.degenerate) ++degenerate;
    for (const std::int8_t c : qv.codes) {
      ++histogram[static_cast<std::size_t>(c + 127)];
      if (c == 0) ++zeros;
    }
    total += qv.codes.size();
  }
  nlohmann::json report{{"store", args.store},
                        {"scheme", header.scheme().name()},
                        {"k", header.k},
                        {"vector_count", reader.count()},
                        {"degenerate_count", degenerate},
                        {"code_count", total}};
  if (header.method != QuantMethod::sign && total > 0)
    report["zero_bin_fraction"] =
        static_cast<double>(zeros) / static_cast<double>(total);
  nlohmann::json hist = nlohmann::json::object();
  for (int c = -127; c <= 127; ++c)
    if (histogram[static_cast<std::size_t>(c + 127)] > 0)
      hist[std::to_string(c)] = histogram[static_cast<std::size_t>(c + 127)];
  report["code_histogram"] = std::move(hist);

  const std::string text = report.dump(2) + "\n";
  if (args.out.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    std::ofstream out(args.out);
    if (!out) throw io_error("cannot write '" + args.out + "'");
    out << text;
  }
  if (!args.histogram_out.empty()) {
    std::ofstream out(args.histogram_out);
    if (!out) throw io_error("cannot write '" + args.histogram_out + "'");
    out << "code,count\n";
    for (int c = -127; c <= 127; ++c)
      if (histogram[static_cast<std::size_t>(c + 127)] > 0)
        out << c << "," << histogram[static_cast<std::size_t>(c + 127)] << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EstimateArgs {
  std::uint64_t num_samples = 0;
  std::uint32_t dim_out = 8192;
  std::uint32_t bits = 1;
  std::uint32_t checkpoints = 1;
  bool include_scales = false;
};

int cmd_estimate_size(const EstimateArgs& args) {
  const std::uint64_t bytes = estimate_size(args.num_samples, args.dim_out,
                                            args.bits, args.checkpoints,
                                            args.include_scales);
  std::printf("bytes=%" PRIu64 " gib=%.3f\n", bytes,
              static_cast<double>(bytes) / (1024.0 * 1024.0 * 1024.0));
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  SynthConfig config;
  std::string seeds = "0";
  std::string schemes = "absmax8,absmax4,absmax2,absmean8,absmean4,absmean2,sign1";
  double fraction = 0.05;
  std::string out_json;
  std::string out_csv;
  int threads = 0;
};

int cmd_synth(const SynthArgs& args) {
  std::vector<QuantScheme> schemes;
  {
    std::string token;
    std::istringstream ss(args.schemes);
    while (std::getline(ss, token, ','))
      if (!token.empty()) schemes.push_back(parse_scheme_name(token));
  }
  std::vector<std::uint64_t> seeds;
  {
    std::string token;
    std::istringstream ss(args.seeds);
    while (std::getline(ss, token, ','))
      if (!token.empty()) seeds.push_back(std::stoull(token));
  }
  if (seeds.empty()) throw config_error("--seeds must name at least one seed");

  nlohmann::json all = nlohmann::json::array();
  std::ostringstream csv;
  csv << FidelityReport::kCsvHeader << "\n";
  for (const std::uint64_t seed : seeds) {
    SynthConfig config = args.config;
    config.seed = seed;
    const FidelityReport report =
        fidelity_sweep(config, schemes, args.fraction,
                       ValAggregation::mean, args.threads);
    all.push_back(report.to_json());
    report.append_csv(csv);
    for (const auto& c : report.cases)
      std::printf("seed=%" PRIu64 " %-9s spearman_vs_fp=%.4f overlap_vs_fp=%.4f "
                  "recovery=%.4f%s\n",
                  seed, c.scheme.c_str(), c.spearman_vs_fp, c.overlap_vs_fp,
                  c.planted_recovery,
                  std::isnan(c.zero_bin)
                      ? ""
                      : (" zero_bin=" + std::to_string(c.zero_bin)).c_str());
  }
  if (!args.out_json.empty()) {
    std::ofstream out(args.out_json);
    if (!out) throw io_error("cannot write '" + args.out_json + "'");
    out << all.dump(2) << "\n";
  }
  if (!args.out_csv.empty()) {
    std::ofstream out(args.out_csv);
    if (!out) throw io_error("cannot write '" + args.out_csv + "'");
    out << csv.str();
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct GenSynthArgs {
  SynthConfig config;
  std::string out_dir;
};

int cmd_gen_synth(const GenSynthArgs& args) {
  SyntheticCorpus corpus(args.config);
  write_raw_corpus(corpus, args.out_dir);
  std::printf("wrote synthetic corpus (%u train, %u val, %u checkpoint(s), "
              "d=%" PRIu64 ") -> %s\n",
              args.config.n_train, args.config.n_val, args.config.n_checkpoints,
              args.config.d, args.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::uint64_t n_train = 270000;
  std::uint32_t n_val = 50;
  std::uint32_t dim_out = 8192;
  std::uint8_t bits = 1;
  std::uint32_t checkpoints = 4;
  std::uint64_t seed = 0;
  int threads = 0;
};

VectorSet random_code_set(std::uint64_t seed, std::uint64_t salt, std::size_t n,
                          std::uint32_t k, QuantScheme scheme,
                          const char* id_prefix) {
  VectorSet s;
  s.scheme = scheme;
  s.k = k;
  s.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%08zu", id_prefix, i);
    s.ids[i] = buf;
  }
  s.scales.assign(n, 1.0f);
  s.degenerate.assign(n, 0);
  s.norms.resize(n);
  if (scheme.bits == 1) {
    s.words = (packed_code_bytes(k, 1) + 7) / 8;
    s.bits.resize(n * s.words);
    for (std::size_t i = 0; i < n * s.words; ++i)
      s.bits[i] = philox4x32::bits64(seed, i, streams::pack(streams::kBench, salt, 1));
    // mask tail bits beyond k so padding stays zero
    const std::uint32_t tail = k & 63;
    if (tail)
      for (std::size_t i = 0; i < n; ++i)
        s.bits[i * s.words + s.words - 1] &= (1ull << tail) - 1;
    const double nk = std::sqrt(static_cast<double>(k));
    for (std::size_t i = 0; i < n; ++i) s.norms[i] = nk;
  } else {
    const int alpha = scheme.max_code();
    s.codes.resize(n * static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < s.codes.size(); ++i) {
      const std::uint32_t r = static_cast<std::uint32_t>(
          philox4x32::bits64(seed, i, streams::pack(streams::kBench, salt, 2)));
      s.codes[i] = static_cast<std::int8_t>(
          static_cast<int>(r % (2 * alpha + 1)) - alpha);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::int64_t sq = 0;
      for (std::uint32_t m = 0; m < k; ++m) {
        const std::int32_t c = s.codes[i * k + m];
        sq += c * c;
      }
      s.norms[i] = std::sqrt(static_cast<double>(sq));
      if (sq == 0) s.degenerate[i] = 1;
    }
  }
  return s;
}

int cmd_bench(const BenchArgs& args) {
  QuantScheme scheme{args.bits == 1 ? QuantMethod::sign : QuantMethod::absmax,
                     args.bits};
  scheme.validate();
  std::printf("bench: generating %" PRIu64 " train x %u val vectors, k=%u, "
              "%s, %u checkpoint(s)\n",
              args.n_train, args.n_val, args.dim_out, scheme.name().c_str(),
              args.checkpoints);
  std::vector<VectorSet> train_sets, val_sets;
  std::vector<double> etas;
  for (std::uint32_t cp = 0; cp < args.checkpoints; ++cp) {
    train_sets.push_back(random_code_set(args.seed, cp * 2 + 0, args.n_train,
                                         args.dim_out, scheme, "train"));
    val_sets.push_back(random_code_set(args.seed, cp * 2 + 1, args.n_val,
                                       args.dim_out, scheme, "val"));
    etas.push_back(2e-5);
  }
  std::vector<const VectorSet*> train_views, val_views;
  for (auto& s : train_sets) train_views.push_back(&s);
  for (auto& s : val_sets) val_views.push_back(&s);

  ScoreOptions options;
  options.threads = args.threads;
  const auto start = std::chrono::steady_clock::now();
  const ScoreTable table =
      score_sets(train_views, val_views, etas, ScoreMode::qless, options);
  const auto elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  const double pairs = static_cast<double>(args.n_train) * args.n_val *
                       args.checkpoints;
  std::printf("bench: scored %" PRIu64 " x %u over %u checkpoint(s) in %.2f s "
              "(%.2fM pair-checkpoint cosines/s), table %zu x %zu\n",
              args.n_train, args.n_val, args.checkpoints, elapsed,
              pairs / elapsed / 1e6, table.train_ids.size(),
              table.tasks.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantized gradient datastore, influence scoring and "
               "top-fraction data selection"};
  app.require_subcommand(1);
  int threads = 0;
  std::string log_level = "warn";
  app.add_option("--threads", threads,
                 "worker threads (default: QGRAD_THREADS or all cores)");
  app.add_option("--log-level", log_level, "error|warn|info|debug");

  ProjectArgs project_args;
  auto* project = app.add_subcommand(
      "project", "project raw gradients into a fixed low dimension");
  project->add_option("--input", project_args.input, "raw gradients (.bin or .jsonl)")
      ->required();
  project->add_option("--format", project_args.format, "auto|bin|jsonl");
  project->add_option("--sidecar", project_args.sidecar,
                      "sidecar JSON path (default <input>.json)");
  project->add_option("--out", project_args.out, "output fp32 store")->required();
  project->add_option("--seed", project_args.seed, "projection seed");
  project->add_option("--dim-out", project_args.dim_out, "projected dimension k")
      ->required();
  project->add_option("--dist", project_args.dist, "rademacher|gaussian");
  project->add_option("--checkpoint-id", project_args.checkpoint_id,
                      "checkpoint id (default: sidecar's)");
  project->add_option("--manifest-out", project_args.manifest_out,
                      "checkpoint manifest to create or update");
  project->add_option("--role", project_args.role,
                      "train|val (store slot in the manifest)");
  project->add_option("--eta", project_args.eta,
                      "learning rate for the manifest entry");
  project->add_option("--block-cols", project_args.block_cols,
                      "columns per regenerated block");

  QuantizeArgs quantize_args;
  auto* quantize = app.add_subcommand(
      "quantize", "quantize an fp32 store into b-bit codes plus scales");
  quantize->add_option("--input-store", quantize_args.input, "fp32 store")
      ->required();
  quantize->add_option("--scheme", quantize_args.scheme, "absmax|absmean|sign");
  quantize->add_option("--bits", quantize_args.bits, "1|2|4|8");
  quantize->add_option("--out", quantize_args.out, "output store")->required();
  quantize->add_option("--manifest-out", quantize_args.manifest_out,
                       "checkpoint manifest to create or update");
  quantize->add_option("--role", quantize_args.role,
                       "train|val (store slot in the manifest)");
  quantize->add_option("--eta", quantize_args.eta,
                       "learning rate for the manifest entry");

  ScoreArgs score_args;
  auto* score = app.add_subcommand(
      "score", "influence scores for every train sample per validation task");
  score->add_option("--train-manifest", score_args.train_manifest)->required();
  score->add_option("--val-manifest", score_args.val_manifest)->required();
  score->add_option("--mode", score_args.mode, "qless|less_fp|tracin");
  score->add_option("--out", score_args.out, "scores CSV")->required();
  score->add_option("--binary-out", score_args.binary_out,
                    "optional exact binary score cache");
  score->add_option("--val-aggregation", score_args.val_aggregation, "mean|sum");
  score->add_option("--degenerate", score_args.degenerate, "skip|error");

  SelectArgs select_args;
  auto* select = app.add_subcommand(
      "select", "rank aggregated scores and keep the top fraction");
  select->add_option("--scores", select_args.scores, "scores CSV or binary cache")
      ->required();
  select->add_option("--fraction", select_args.fraction, "fraction in (0,1]")
      ->required();
  select->add_option("--out", select_args.out, "selection JSONL")->required();
  select->add_option("--ids-out", select_args.ids_out, "plain id list");
  select->add_option("--config-out", select_args.config_out,
                     "config echo sidecar (default <out>.config.json)");
  select->add_option("--task-reduction", select_args.task_reduction, "max|mean");

  AnalyzeArgs analyze_args;
  auto* analyze = app.add_subcommand(
      "analyze", "zero-bin occupancy and code histogram of a quantized store");
  analyze->add_option("--store", analyze_args.store)->required();
  analyze->add_option("--out", analyze_args.out, "JSON report (default stdout)");
  analyze->add_option("--histogram-out", analyze_args.histogram_out,
                      "code histogram CSV");

  EstimateArgs estimate_args;
  auto* estimate = app.add_subcommand(
      "estimate-size", "datastore size arithmetic for a given shape");
  estimate->add_option("--num-samples", estimate_args.num_samples)->required();
  estimate->add_option("--dim-out", estimate_args.dim_out)->required();
  estimate->add_option("--bits", estimate_args.bits)->required();
  estimate->add_option("--checkpoints", estimate_args.checkpoints)->required();
  estimate->add_flag("--include-scales", estimate_args.include_scales);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand(
      "synth", "synthetic fidelity sweep against the full-precision oracle");
  synth->add_option("--seeds", synth_args.seeds, "comma-separated seeds");
  synth->add_option("--d", synth_args.config.d, "raw gradient dimension");
  synth->add_option("--dim-out", synth_args.config.k, "projected dimension");
  synth->add_option("--n-train", synth_args.config.n_train);
  synth->add_option("--n-val", synth_args.config.n_val);
  synth->add_option("--n-tasks", synth_args.config.n_tasks);
  synth->add_option("--checkpoints", synth_args.config.n_checkpoints);
  synth->add_option("--cluster-count", synth_args.config.cluster_count);
  synth->add_option("--cluster-strength", synth_args.config.cluster_strength);
  synth->add_option("--noise-sigma", synth_args.config.noise_sigma);
  synth->add_option("--schemes", synth_args.schemes, "e.g. absmax8,sign1");
  synth->add_option("--fraction", synth_args.fraction, "selection fraction");
  synth->add_option("--out-json", synth_args.out_json);
  synth->add_option("--out-csv", synth_args.out_csv);

  GenSynthArgs gen_args;
  auto* gen = app.add_subcommand(
      "gen-synth", "write a synthetic raw gradient corpus for the pipeline");
  gen->add_option("--out-dir", gen_args.out_dir)->required();
  gen->add_option("--seed", gen_args.config.seed);
  gen->add_option("--d", gen_args.config.d);
  gen->add_option("--dim-out", gen_args.config.k);
  gen->add_option("--n-train", gen_args.config.n_train);
  gen->add_option("--n-val", gen_args.config.n_val);
  gen->add_option("--n-tasks", gen_args.config.n_tasks);
  gen->add_option("--checkpoints", gen_args.config.n_checkpoints);
  gen->add_option("--cluster-count", gen_args.config.cluster_count);
  gen->add_option("--cluster-strength", gen_args.config.cluster_strength);
  gen->add_option("--noise-sigma", gen_args.config.noise_sigma);

  BenchArgs bench_args;
  auto* bench = app.add_subcommand(
      "bench", "time batch scoring on randomly generated code stores");
  bench->add_option("--n-train", bench_args.n_train);
  bench->add_option("--n-val", bench_args.n_val);
  bench->add_option("--dim-out", bench_args.dim_out);
  bench->add_option("--bits", bench_args.bits);
  bench->add_option("--checkpoints", bench_args.checkpoints);
  bench->add_option("--seed", bench_args.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  log::set_level(log::level_from_string(log_level));
  project_args.threads = threads;
  score_args.threads = threads;
  synth_args.threads = threads;
  bench_args.threads = threads;

  std::uint64_t seed = 0;
  std::string cmd;
  if (project->parsed()) cmd = "project", seed = project_args.seed;
  if (quantize->parsed()) cmd = "quantize";
  if (score->parsed()) cmd = "score";
  if (select->parsed()) cmd = "select";
  if (analyze->parsed()) cmd = "analyze";
  if (estimate->parsed()) cmd = "estimate-size";
  if (synth->parsed()) cmd = "synth";
  if (gen->parsed()) cmd = "gen-synth", seed = gen_args.config.seed;
  if (bench->parsed()) cmd = "bench", seed = bench_args.seed;
  provenance_line(cmd, seed, argc, argv);

  try {
    if (project->parsed()) return cmd_project(project_args);
    if (quantize->parsed()) return cmd_quantize(quantize_args);
    if (score->parsed()) return cmd_score(score_args);
    if (select->parsed()) return cmd_select(select_args);
    if (analyze->parsed()) return cmd_analyze(analyze_args);
    if (estimate->parsed()) return cmd_estimate_size(estimate_args);
    if (synth->parsed()) return cmd_synth(synth_args);
    if (gen->parsed()) return cmd_gen_synth(gen_args);
    if (bench->parsed()) return cmd_bench(bench_args);
  } catch (const io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const qgrad::error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
