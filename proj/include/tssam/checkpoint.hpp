#pragma once

// Single-file checkpoint: a text manifest followed by the raw little-endian payload.
//
//   TSSAM-CKPT 1
//   config {...}                       model config JSON on one line, or "null"
//   entry name=<n> dtype=f32|f64 shape=a,b,c frozen=0|1 kind=parameter|buffer offset=<bytes>
//   ...
//   payload_bytes=<n>
//   sha256=<hex digest of the payload>
//   end
//   <payload>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tssam/hashing.hpp"
#include "tssam/params.hpp"

namespace tssam {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host byte order");

inline constexpr const char* kCheckpointMagic = "TSSAM-CKPT";
inline constexpr int kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class T>
struct Checkpoint {
  ParamStore<T> store;
  nlohmann::json config;  // null when the writer supplied none
};

/// Writes atomically via a sibling temporary file.
template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path, const nlohmann::json& config = nullptr) {
  std::ostringstream head;
  head << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  head << "config " << config.dump() << '\n';
  std::size_t offset = 0;
  Sha256 digest;
  for (const auto& e : store.entries()) {
    head << "entry name=" << e.name << " dtype=" << dtype_name<T>() << " shape=";
    for (std::size_t i = 0; i < e.value.rank(); ++i) head << (i ? "," : "") << e.value.dim(i);
    head << " frozen=" << (e.frozen ? 1 : 0) << " kind=" << (e.kind == EntryKind::buffer ? "buffer" : "parameter")
         << " offset=" << offset << '\n';
    offset += e.value.numel() * sizeof(T);
    digest.update(e.value.data(), e.value.numel() * sizeof(T));
  }
  head << "payload_bytes=" << offset << '\n' << "sha256=" << digest.hex() << '\n' << "end\n";

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrc::io, "cannot open '" + tmp + "' for writing");
    const auto h = head.str();
    out.write(h.data(), std::streamsize(h.size()));
    for (const auto& e : store.entries())
      out.write(reinterpret_cast<const char*>(e.value.data()), std::streamsize(e.value.numel() * sizeof(T)));
    if (!out.flush()) throw CheckpointError(CheckpointErrc::io, "write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrc::io, "cannot move checkpoint into '" + path + "': " + ec.message());
}

namespace detail {

struct ManifestEntry {
  std::string name, dtype, kind;
  Shape shape;
  bool frozen = false;
  std::size_t offset = 0;
};

inline std::size_t parse_size(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw CheckpointError(CheckpointErrc::manifest, "bad " + what + " '" + s + "'");
  return std::stoull(s);
}

inline ManifestEntry parse_entry(const std::string& line) {
  std::istringstream is(line.substr(6));
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw CheckpointError(CheckpointErrc::manifest, "malformed token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  for (const char* k : {"name", "dtype", "shape", "frozen", "kind", "offset"})
    if (!kv.count(k)) throw CheckpointError(CheckpointErrc::manifest, "entry line missing '" + std::string(k) + "': " + line);
  ManifestEntry e;
  e.name = kv["name"];
  e.dtype = kv["dtype"];
  e.kind = kv["kind"];
  if (e.dtype != "f32" && e.dtype != "f64") throw CheckpointError(CheckpointErrc::manifest, e.name + ": unknown dtype " + e.dtype);
  if (e.kind != "parameter" && e.kind != "buffer") throw CheckpointError(CheckpointErrc::manifest, e.name + ": unknown kind " + e.kind);
  if (kv["frozen"] != "0" && kv["frozen"] != "1") throw CheckpointError(CheckpointErrc::manifest, e.name + ": bad frozen flag");
  e.frozen = kv["frozen"] == "1";
  e.offset = parse_size(kv["offset"], e.name + " offset");
  std::istringstream ss(kv["shape"]);
  for (std::string d; std::getline(ss, d, ',');) e.shape.push_back(parse_size(d, e.name + " shape"));
  return e;
}

template <class T, class S>
Tensor<T> decode(const char* bytes, const Shape& shape) {
  std::vector<S> raw(numel_of(shape));
  std::memcpy(raw.data(), bytes, raw.size() * sizeof(S));
  std::vector<T> out(raw.begin(), raw.end());
  return Tensor<T>(shape, std::move(out));
}

}  // namespace detail

/// Reads and fully validates a checkpoint; nothing is returned on any error.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::io, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(CheckpointErrc::truncated, "empty file");
  {
    std::istringstream is(line);
    std::string magic;
    int version = -1;
    is >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError(CheckpointErrc::bad_magic, "not a checkpoint file: '" + path + "'");
    if (version != kCheckpointVersion)
      throw CheckpointError(CheckpointErrc::version_mismatch,
                            "file version " + std::to_string(version) + ", reader version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint<T> ck;
  std::vector<detail::ManifestEntry> entries;
  std::optional<std::size_t> payload_bytes;
  std::string sha;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("config ", 0) == 0) {
      try {
        ck.config = nlohmann::json::parse(line.substr(7));
      } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointErrc::manifest, std::string("config line: ") + e.what());
      }
    } else if (line.rfind("entry ", 0) == 0) {
      entries.push_back(detail::parse_entry(line));
    } else if (line.rfind("payload_bytes=", 0) == 0) {
      payload_bytes = detail::parse_size(line.substr(14), "payload_bytes");
    } else if (line.rfind("sha256=", 0) == 0) {
      sha = line.substr(7);
    } else {
      throw CheckpointError(CheckpointErrc::manifest, "unexpected manifest line '" + line + "'");
    }
  }
  if (!ended) throw CheckpointError(CheckpointErrc::truncated, "manifest ends before 'end' marker");
  if (!payload_bytes || sha.empty()) throw CheckpointError(CheckpointErrc::manifest, "missing payload_bytes or sha256");

  std::string payload(*payload_bytes, '\0');
  in.read(payload.data(), std::streamsize(payload.size()));
  if (std::size_t(in.gcount()) != payload.size())
    throw CheckpointError(CheckpointErrc::truncated, "payload has " + std::to_string(in.gcount()) + " of " +
                                                         std::to_string(payload.size()) + " bytes");
  if (in.peek() != std::char_traits<char>::eof())
    throw CheckpointError(CheckpointErrc::manifest, "trailing bytes after declared payload");

  std::size_t expect = 0;
  for (const auto& e : entries) {
    const std::size_t width = e.dtype == "f32" ? 4 : 8;
    const std::size_t bytes = numel_of(e.shape) * width;
    if (e.offset != expect || e.offset + bytes > payload.size())
      throw CheckpointError(CheckpointErrc::manifest, "entry '" + e.name + "' shape " + to_string(e.shape) +
                                                          " disagrees with payload layout");
    expect += bytes;
  }
  if (expect != payload.size())
    throw CheckpointError(CheckpointErrc::manifest, "entries cover " + std::to_string(expect) + " bytes, payload has " +
                                                        std::to_string(payload.size()));
  if (sha256_hex(payload) != sha) throw CheckpointError(CheckpointErrc::checksum, "payload digest mismatch");

  for (const auto& e : entries) {
    const char* p = payload.data() + e.offset;
    auto value = e.dtype == "f32" ? detail::decode<T, float>(p, e.shape) : detail::decode<T, double>(p, e.shape);
    try {
      ck.store.add(e.name, std::move(value), e.frozen, e.kind == "buffer" ? EntryKind::buffer : EntryKind::parameter);
    } catch (const ConfigError& err) {
      throw CheckpointError(CheckpointErrc::manifest, err.what());
    }
  }
  return ck;
}

}  // namespace tssam
