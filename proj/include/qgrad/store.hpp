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

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qgrad/error.hpp"
#include "qgrad/quantizer.hpp"
#include "qgrad/version.hpp"

namespace qgrad {

// On-disk layout (little-endian throughout):
//
//   magic[8] = "QGSTORE1"
//   u16 version            (major << 8 | minor; same-major opens)
//   u8  method             (0 fp32, 1 absmax, 2 absmean, 3 sign)
//   u8  bits               (32 for fp32, else 1/2/4/8)
//   u32 k
//   u64 vector_count
//   u32 flags              (bit 0: degenerate bitmap present)
//   u32 checkpoint_id_len, bytes
//   index block:           count x (u32 id_len, id bytes), write order
//   degenerate bitmap:     ceil(count/8) bytes, iff flag bit 0
//   payload:               count x (f32 scale, code bytes)
//
// code bytes per record = ceil(k*b/8) for quantized methods, 4*k for fp32.
// Fixed record size makes sample lookups a single offset computation.

inline constexpr char kStoreMagic[8] = {'Q', 'G', 'S', 'T', 'O', 'R', 'E', '1'};
inline constexpr std::uint32_t kStoreFlagDegenerateBitmap = 1u;

struct StoreHeader {
  QuantMethod method = QuantMethod::fp32;
  std::uint8_t bits = 32;
  std::uint32_t k = 0;
  std::string checkpoint_id;

  QuantScheme scheme() const { return QuantScheme{method, bits}; }

  std::size_t code_bytes() const {
    return method == QuantMethod::fp32
               ? static_cast<std::size_t>(k) * 4
               : packed_code_bytes(k, bits);
  }
  std::size_t record_bytes() const { return 4 + code_bytes(); }

  void validate() const {
    if (k == 0) throw config_error("store header: k must be positive");
    scheme().validate();
  }
};

struct WriteSummary {
  std::uint64_t count = 0;
  std::uint64_t bytes = 0;  // final file size
};

// Exact storage arithmetic for a datastore of `n` samples at `checkpoints`
// checkpoints: code bytes only, plus one f32 scale per vector on request.
inline std::uint64_t estimate_size(std::uint64_t n, std::uint32_t k,
                                   std::uint32_t bits,
                                   std::uint32_t checkpoints,
                                   bool include_scales) {
  if (n == 0 || k == 0 || bits == 0 || checkpoints == 0)
    throw config_error("estimate_size: all arguments must be positive");
  const std::uint64_t per_vector =
      (static_cast<std::uint64_t>(k) * bits + 7) / 8 + (include_scales ? 4 : 0);
  std::uint64_t vectors = 0, total = 0;
  if (__builtin_mul_overflow(n, static_cast<std::uint64_t>(checkpoints),
                             &vectors) ||
      __builtin_mul_overflow(vectors, per_vector, &total))
    throw config_error("estimate_size: result overflows 64 bits");
  return total;
}

namespace detail {

inline void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xFF));
  b.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::string& b, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(b, u);
}

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n, const std::string& path)
      : p_(p), n_(n), path_(path) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(u8() | (u8() << 8)); }
  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  void need(std::size_t len) const {
    if (pos_ + len > n_)
      throw corruption_error("store '" + path_ + "' truncated at offset " +
                             std::to_string(pos_) + ": need " +
                             std::to_string(len) + " more bytes, file has " +
                             std::to_string(n_ - pos_));
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  const std::string& path_;
};

}  // namespace detail

// Streams vectors to a temp file; finalize() assembles
// header | index | bitmap | payload and renames into place, so a store path
// is either absent, the old version, or complete.
class StoreWriter {
 public:
  StoreWriter(std::filesystem::path path, StoreHeader header)
      : path_(std::move(path)), header_(std::move(header)) {
    header_.validate();
    payload_path_ = path_;
    payload_path_ += ".payload.tmp";
    payload_ = std::fopen(payload_path_.c_str(), "wb");
    if (!payload_)
      throw io_error("cannot create '" + payload_path_.string() +
                     "': " + std::strerror(errno));
  }

  ~StoreWriter() {
    if (payload_) {
      std::fclose(payload_);
      std::error_code ec;
      std::filesystem::remove(payload_path_, ec);
    }
  }

  StoreWriter(const StoreWriter&) = delete;
  StoreWriter& operator=(const StoreWriter&) = delete;

  const StoreHeader& header() const noexcept { return header_; }

  void append(const QuantizedVector& qv) {
    if (qv.scheme != header_.scheme())
      throw data_error("store '" + path_.string() + "': vector scheme " +
                       qv.scheme.name() + " does not match store scheme " +
                       header_.scheme().name());
    if (qv.codes.size() != header_.k)
      throw dimension_error("store '" + path_.string() + "': vector '" +
                            qv.sample_id + "' has k=" +
                            std::to_string(qv.codes.size()) + ", store has k=" +
                            std::to_string(header_.k));
    const auto packed = pack_codes(qv.codes, header_.bits);
    append_record(qv.sample_id, qv.scale, packed.data(), packed.size(),
                  qv.degenerate);
  }

  void append_fp32(const std::string& sample_id, std::span<const float> v,
                   bool degenerate = false) {
    if (header_.method != QuantMethod::fp32)
      throw data_error("store '" + path_.string() +
                       "' is quantized; cannot append fp32 vectors");
    if (v.size() != header_.k)
      throw dimension_error("store '" + path_.string() + "': vector '" +
                            sample_id + "' has k=" + std::to_string(v.size()) +
                            ", store has k=" + std::to_string(header_.k));
    append_record(sample_id, 1.0f,
                  reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * 4,
                  degenerate);
  }

  WriteSummary finalize() {
    if (!payload_) throw io_error("store writer already finalized");
    if (std::fclose(payload_) != 0) {
      payload_ = nullptr;
      throw io_error("write to '" + payload_path_.string() +
                     "' failed: " + std::strerror(errno));
    }
    payload_ = nullptr;

    std::string head;
    head.append(kStoreMagic, 8);
    detail::put_u16(head, kStoreFormatVersion);
    head.push_back(static_cast<char>(header_.method));
    head.push_back(static_cast<char>(header_.bits));
    detail::put_u32(head, header_.k);
    detail::put_u64(head, ids_.size());
    const bool bitmap = !degenerate_.empty();
    detail::put_u32(head, bitmap ? kStoreFlagDegenerateBitmap : 0);
    detail::put_u32(head, static_cast<std::uint32_t>(header_.checkpoint_id.size()));
    head.append(header_.checkpoint_id);
    for (const auto& id : ids_) {
      detail::put_u32(head, static_cast<std::uint32_t>(id.size()));
      head.append(id);
    }
    if (bitmap) {
      std::string bits((ids_.size() + 7) / 8, '\0');
      for (std::uint64_t i : degenerate_)
        bits[i >> 3] |= static_cast<char>(1u << (i & 7));
      head.append(bits);
    }

    std::filesystem::path tmp = path_;
    tmp += ".tmp";
    std::FILE* out = std::fopen(tmp.c_str(), "wb");
    if (!out)
      throw io_error("cannot create '" + tmp.string() +
                     "': " + std::strerror(errno));
    bool ok = std::fwrite(head.data(), 1, head.size(), out) == head.size();
    std::uint64_t total = head.size();
    if (ok) {
      std::FILE* in = std::fopen(payload_path_.c_str(), "rb");
      if (!in) {
        std::fclose(out);
        throw io_error("cannot reopen '" + payload_path_.string() +
                       "': " + std::strerror(errno));
      }
      char buf[1 << 16];
      std::size_t got;
      while (ok && (got = std::fread(buf, 1, sizeof buf, in)) > 0) {
        ok = std::fwrite(buf, 1, got, out) == got;
        total += got;
      }
      std::fclose(in);
    }
    if (std::fclose(out) != 0) ok = false;
    std::error_code ec;
    if (!ok) {
      std::filesystem::remove(tmp, ec);
      std::filesystem::remove(payload_path_, ec);
      throw io_error("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::remove(payload_path_, ec);
    std::filesystem::rename(tmp, path_, ec);
    if (ec)
      throw io_error("cannot rename '" + tmp.string() + "' to '" +
                     path_.string() + "': " + ec.message());
    return WriteSummary{ids_.size(), total};
  }

 private:
  void append_record(const std::string& sample_id, float scale,
                     const std::uint8_t* bytes, std::size_t nbytes,
                     bool degenerate) {
    if (!payload_) throw io_error("store writer already finalized");
    if (!seen_.emplace(sample_id, ids_.size()).second)
      throw data_error("store '" + path_.string() + "': duplicate sample_id '" +
                       sample_id + "'");
    if (degenerate) degenerate_.push_back(ids_.size());
    ids_.push_back(sample_id);
    std::uint32_t u;
    std::memcpy(&u, &scale, 4);
    std::uint8_t s4[4] = {static_cast<std::uint8_t>(u & 0xFF),
                          static_cast<std::uint8_t>((u >> 8) & 0xFF),
                          static_cast<std::uint8_t>((u >> 16) & 0xFF),
                          static_cast<std::uint8_t>((u >> 24) & 0xFF)};
    if (std::fwrite(s4, 1, 4, payload_) != 4 ||
        std::fwrite(bytes, 1, nbytes, payload_) != nbytes)
      throw io_error("write to '" + payload_path_.string() +
                     "' failed: " + std::strerror(errno));
  }

  std::filesystem::path path_;
  std::filesystem::path payload_path_;
  StoreHeader header_;
  std::FILE* payload_ = nullptr;
  std::vector<std::string> ids_;
  std::vector<std::uint64_t> degenerate_;
  std::unordered_map<std::string, std::uint64_t> seen_;
};

// Read-only view of a finalized store. The file is mapped once; record
// reads are offset computations into the mapping, safe from any number of
// threads concurrently.
class StoreReader {
 public:
  explicit StoreReader(std::filesystem::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_RDONLY);
    if (fd < 0)
      throw io_error("cannot open '" + path_.string() +
                     "': " + std::strerror(errno));
    struct stat st{};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      throw io_error("cannot stat '" + path_.string() +
                     "': " + std::strerror(errno));
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* m = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
      if (m == MAP_FAILED) {
        ::close(fd);
        throw io_error("cannot mmap '" + path_.string() +
                       "': " + std::strerror(errno));
      }
      map_ = static_cast<const std::uint8_t*>(m);
    }
    ::close(fd);
    parse();
  }

  ~StoreReader() {
    if (map_) ::munmap(const_cast<std::uint8_t*>(map_), size_);
  }

  StoreReader(const StoreReader&) = delete;
  StoreReader& operator=(const StoreReader&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  const StoreHeader& header() const noexcept { return header_; }
  std::uint64_t count() const noexcept { return ids_.size(); }
  // Sample ids in write order; sequential scans follow this order.
  const std::vector<std::string>& sample_ids() const noexcept { return ids_; }

  bool contains(const std::string& sample_id) const {
    return index_.count(sample_id) != 0;
  }

  std::uint64_t index_of(const std::string& sample_id) const {
    const auto it = index_.find(sample_id);
    if (it == index_.end())
      throw lookup_error("store '" + path_.string() +
                         "': unknown sample_id '" + sample_id + "'");
    return it->second;
  }

  bool degenerate_at(std::uint64_t i) const {
    check_row(i);
    if (!bitmap_) return false;
    return (bitmap_[i >> 3] >> (i & 7)) & 1u;
  }

  float scale_at(std::uint64_t i) const {
    check_row(i);
    float f;
    std::memcpy(&f, record_ptr(i), 4);
    return f;
  }

  // Raw packed code bytes for row i (exactly as written).
  std::span<const std::uint8_t> packed_at(std::uint64_t i) const {
    check_row(i);
    return {record_ptr(i) + 4, header_.code_bytes()};
  }

  QuantizedVector read_at(std::uint64_t i) const {
    if (header_.method == QuantMethod::fp32)
      throw data_error("store '" + path_.string() +
                       "' holds fp32 vectors; use read_fp32_at()");
    QuantizedVector qv;
    qv.sample_id = ids_[static_cast<std::size_t>(i)];
    qv.checkpoint_id = header_.checkpoint_id;
    qv.scheme = header_.scheme();
    qv.scale = scale_at(i);
    qv.degenerate = degenerate_at(i);
    qv.codes = unpack_codes(packed_at(i), header_.k, header_.bits);
    return qv;
  }

  QuantizedVector read(const std::string& sample_id) const {
    return read_at(index_of(sample_id));
  }

  std::vector<float> read_fp32_at(std::uint64_t i) const {
    if (header_.method != QuantMethod::fp32)
      throw data_error("store '" + path_.string() +
                       "' holds quantized vectors; use read_at()");
    check_row(i);
    std::vector<float> v(header_.k);
    std::memcpy(v.data(), record_ptr(i) + 4, header_.k * 4ull);
    return v;
  }

  std::vector<float> read_fp32(const std::string& sample_id) const {
    return read_fp32_at(index_of(sample_id));
  }

 private:
  void parse() {
    detail::Reader r(map_, size_, path_string_cache_ = path_.string());
    const std::string magic = r.bytes(8);
    if (std::memcmp(magic.data(), kStoreMagic, 8) != 0)
      throw format_error("'" + path_.string() + "' is not a gradient store: " +
                         "expected magic \"QGSTORE1\", found \"" +
                         printable(magic) + "\"");
    const std::uint16_t version = r.u16();
    if ((version >> 8) != kVersionMajor)
      throw format_error("'" + path_.string() + "': unsupported major version " +
                         std::to_string(version >> 8) + " (reader is " +
                         std::to_string(kVersionMajor) + ")");
    header_.method = static_cast<QuantMethod>(r.u8());
    header_.bits = r.u8();
    header_.k = r.u32();
    const std::uint64_t count = r.u64();
    const std::uint32_t flags = r.u32();
    header_.checkpoint_id = r.bytes(r.u32());
    header_.validate();
    // Each vector needs at least an index length field and a scale, so a
    // count beyond size/4 can only come from a mangled header.
    if (count > size_ / 4)
      throw corruption_error("store '" + path_.string() +
                             "': vector_count " + std::to_string(count) +
                             " impossible for a " + std::to_string(size_) +
                             "-byte file");
    ids_.reserve(static_cast<std::size_t>(count));
    index_.reserve(static_cast<std::size_t>(count));
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string id = r.bytes(r.u32());
      if (!index_.emplace(id, i).second)
        throw corruption_error("store '" + path_.string() +
                               "': duplicate sample_id '" + id + "' in index");
      ids_.push_back(std::move(id));
    }
    if (flags & kStoreFlagDegenerateBitmap) {
      const std::size_t nbytes = static_cast<std::size_t>((count + 7) / 8);
      r.need(nbytes);
      bitmap_ = map_ + r.pos();
      r.bytes(nbytes);
    }
    payload_offset_ = r.pos();
    const std::uint64_t expect = payload_offset_ + count * header_.record_bytes();
    if (size_ != expect)
      throw corruption_error(
          "store '" + path_.string() + "': payload at offset " +
          std::to_string(payload_offset_) + " should end at byte " +
          std::to_string(expect) + ", file has " + std::to_string(size_));
  }

  static std::string printable(const std::string& s) {
    std::string out;
    for (unsigned char c : s)
      if (c >= 0x20 && c < 0x7F)
        out.push_back(static_cast<char>(c));
      else {
        char hex[5];
        std::snprintf(hex, sizeof hex, "\\x%02X", c);
        out += hex;
      }
    return out;
  }

  void check_row(std::uint64_t i) const {
    if (i >= ids_.size())
      throw lookup_error("store '" + path_.string() + "': row " +
                         std::to_string(i) + " out of range (count=" +
                         std::to_string(ids_.size()) + ")");
  }

  const std::uint8_t* record_ptr(std::uint64_t i) const {
    return map_ + payload_offset_ + i * header_.record_bytes();
  }

  std::filesystem::path path_;
  std::string path_string_cache_;
  const std::uint8_t* map_ = nullptr;
  std::size_t size_ = 0;
  StoreHeader header_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::uint64_t> index_;
  const std::uint8_t* bitmap_ = nullptr;
  std::size_t payload_offset_ = 0;
};

}  // namespace qgrad
