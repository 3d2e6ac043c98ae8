// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints are two files: a plain-text manifest at `path` and a blob of
// little-endian 64-bit floats at `path + ".blob"`.
//
// Manifest layout (one record per line):
//   dgc-checkpoint 1
//   precision float|double
//   epoch <next epoch>
//   threshold <hex float>
//   threshold_updates <n>
//   stats_ready 0|1
//   rng <engine state>
//   config <line>                       (repeated; the training config)
//   param <name> <shape> <offset> <count>
//   velocity <name> <shape> <offset> <count>
//   buffer <name> <shape> <offset> <count>
//   library <rows>x<row length> <offset> <count>
//   blob <total values>
// Entries appear in blob order and partition it exactly.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "dgc/config.hpp"
#include "dgc/trainer.hpp"

namespace dgc {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointMagic = "dgc-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  return manifest.string() + ".blob";
}

namespace detail {

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw CheckpointError("manifest: malformed " + what + " '" + s + "'");
  return v;
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw CheckpointError("manifest: malformed " + what + " '" + s + "'");
  }
  return static_cast<std::size_t>(std::stoull(s));
}

inline std::string dims_text(const std::vector<std::size_t>& dims, std::size_t count) {
  if (dims.empty()) return std::to_string(count);
  std::string out;
  for (std::size_t d : dims) out += (out.empty() ? "" : "x") + std::to_string(d);
  return out;
}

struct Entry {
  std::string kind;
  std::string name;
  std::string shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

inline void put_le(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<unsigned char>(bits & 0xffU));
    bits >>= 8;
  }
}

inline double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

template <typename T>
constexpr const char* precision_name() {
  return std::is_same_v<T, float> ? "float" : "double";
}

}  // namespace detail

template <typename T>
void save_checkpoint(TrainerState<T>& state, const std::filesystem::path& path) {
  using detail::Entry;
  std::vector<unsigned char> blob;
  std::vector<Entry> entries;
  std::size_t offset = 0;
  auto emit = [&](const std::string& kind, const std::string& name, const std::string& shape, std::span<const T> v) {
    entries.push_back({kind, name, shape, offset, v.size()});
    for (T x : v) detail::put_le(blob, static_cast<double>(x));
    offset += v.size();
  };
  auto params = state.net.params();
  for (const auto& p : params) emit("param", p.name, detail::dims_text(p.dims, p.value.size()), p.value);
  if (!state.optim.velocity.empty()) {
    if (state.optim.velocity.size() != params.size()) throw CheckpointError("optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      emit("velocity", params[i].name, detail::dims_text(params[i].dims, params[i].value.size()),
           state.optim.velocity[i]);
    }
  }
  for (const auto& [name, buf] : state.net.buffers()) emit("buffer", name, std::to_string(buf.size()), buf);
  std::vector<T> lib;
  for (const auto& row : state.library.data()) lib.insert(lib.end(), row.begin(), row.end());
  emit("library", "library", std::to_string(state.library.rows()) + "x" + std::to_string(state.library.row_length()),
       lib);

  std::ostringstream m;
  m << kCheckpointMagic << " " << kCheckpointVersion << "\n"
    << "precision " << detail::precision_name<T>() << "\n"
    << "epoch " << state.epoch << "\n"
    << "threshold " << detail::hex_double(state.global.threshold) << "\n"
    << "threshold_updates " << state.global.updates << "\n"
    << "stats_ready " << (state.net.stats_ready() ? 1 : 0) << "\n"
    << "rng " << state.rng << "\n";
  std::istringstream cfg(to_text(state.config));
  for (std::string line; std::getline(cfg, line);) m << "config " << line << "\n";
  for (const auto& e : entries) {
    if (e.kind == "library") {
      m << "library " << e.shape << " " << e.offset << " " << e.count << "\n";
    } else {
      m << e.kind << " " << e.name << " " << e.shape << " " << e.offset << " " << e.count << "\n";
    }
  }
  m << "blob " << offset << "\n";

  std::ofstream mf(path, std::ios::binary | std::ios::trunc);
  if (!mf) throw CheckpointError("cannot write checkpoint manifest '" + path.string() + "'");
  mf << m.str();
  std::ofstream bf(blob_path(path), std::ios::binary | std::ios::trunc);
  if (!bf) throw CheckpointError("cannot write checkpoint blob '" + blob_path(path).string() + "'");
  bf.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!mf || !bf) throw CheckpointError("short write while saving checkpoint '" + path.string() + "'");
}

/// Training config recorded in a checkpoint manifest.
inline TrainConfig checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read checkpoint manifest '" + path.string() + "'");
  std::string text;
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("config ", 0) == 0) text += line.substr(7) + "\n";
  }
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint '" + path.string() + "' holds an invalid config: " + e.what());
  }
}

/// Precision ("float" or "double") recorded in a checkpoint manifest.
inline std::string checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read checkpoint manifest '" + path.string() + "'");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("precision ", 0) == 0) return line.substr(10);
  }
  throw CheckpointError("checkpoint manifest '" + path.string() + "' has no precision record");
}

/// Rebuilds the full training state. Nothing is returned unless the
/// manifest, the blob, and the model all agree.
template <typename T>
TrainerState<T> load_checkpoint(const std::filesystem::path& path) {
  using detail::Entry;
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read checkpoint manifest '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  {
    std::istringstream hs(line);
    std::string magic;
    int version = -1;
    hs >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError("'" + path.string() + "' is not a checkpoint manifest");
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
  }
  std::string precision, rng_text, config_text;
  std::size_t epoch = 0, updates = 0, total = 0;
  double threshold = 0;
  bool stats_ready = false, have_blob = false;
  std::vector<Entry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    std::istringstream ls(rest);
    if (key == "precision") precision = rest;
    else if (key == "epoch") epoch = detail::parse_size(rest, "epoch");
    else if (key == "threshold") threshold = detail::parse_double(rest, "threshold");
    else if (key == "threshold_updates") updates = detail::parse_size(rest, "threshold_updates");
    else if (key == "stats_ready") stats_ready = detail::parse_size(rest, "stats_ready") != 0;
    else if (key == "rng") rng_text = rest;
    else if (key == "config") config_text += rest + "\n";
    else if (key == "blob") {
      total = detail::parse_size(rest, "blob size");
      have_blob = true;
    } else if (key == "param" || key == "velocity" || key == "buffer" || key == "library") {
      Entry e;
      e.kind = key;
      std::string off, cnt;
      if (key == "library") {
        e.name = "library";
        ls >> e.shape >> off >> cnt;
      } else {
        ls >> e.name >> e.shape >> off >> cnt;
      }
      e.offset = detail::parse_size(off, key + " offset");
      e.count = detail::parse_size(cnt, key + " count");
      entries.push_back(e);
    } else {
      throw CheckpointError("manifest: unknown record '" + key + "'");
    }
  }
  if (!have_blob) throw CheckpointError("manifest: missing blob record");
  if (precision != detail::precision_name<T>()) {
    throw CheckpointError("checkpoint precision is '" + precision + "', loader expects '" +
                          detail::precision_name<T>() + "'");
  }
  std::size_t expect = 0;
  for (const auto& e : entries) {
    if (e.offset != expect) {
      throw CheckpointError("manifest: entry '" + e.name + "' starts at " + std::to_string(e.offset) + ", expected " +
                            std::to_string(expect));
    }
    expect += e.count;
  }
  if (expect != total) {
    throw CheckpointError("manifest: entries cover " + std::to_string(expect) + " values, blob record says " +
                          std::to_string(total));
  }

  std::ifstream bf(blob_path(path), std::ios::binary);
  if (!bf) throw CheckpointError("cannot read checkpoint blob '" + blob_path(path).string() + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (bytes.size() != total * 8) {
    throw CheckpointError("checkpoint blob has " + std::to_string(bytes.size()) + " bytes, manifest expects " +
                          std::to_string(total * 8));
  }

  TrainConfig cfg;
  try {
    cfg = parse_config(config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  TrainerState<T> s = make_trainer<T>(cfg);
  s.epoch = epoch;
  s.global.threshold = threshold;
  s.global.updates = updates;
  {
    std::istringstream rs(rng_text);
    rs >> s.rng;
    if (!rs) throw CheckpointError("manifest: malformed rng state");
  }
  auto read = [&](const Entry& e, std::span<T> dst) {
    if (dst.size() != e.count) {
      throw CheckpointError(e.kind + " '" + e.name + "' has " + std::to_string(e.count) + " values, model expects " +
                            std::to_string(dst.size()));
    }
    for (std::size_t i = 0; i < e.count; ++i) dst[i] = static_cast<T>(detail::get_le(bytes.data() + (e.offset + i) * 8));
  };
  auto params = s.net.params();
  auto buffers = s.net.buffers();
  std::size_t pi = 0, vi = 0, bi = 0;
  bool have_library = false;
  for (const auto& e : entries) {
    if (e.kind == "param") {
      if (pi >= params.size() || params[pi].name != e.name) throw CheckpointError("unexpected parameter '" + e.name + "'");
      read(e, params[pi++].value);
    } else if (e.kind == "velocity") {
      if (vi >= params.size() || params[vi].name != e.name) throw CheckpointError("unexpected velocity '" + e.name + "'");
      s.optim.velocity.emplace_back(params[vi].value.size());
      read(e, s.optim.velocity.back());
      ++vi;
    } else if (e.kind == "buffer") {
      if (bi >= buffers.size() || buffers[bi].first != e.name) throw CheckpointError("unexpected buffer '" + e.name + "'");
      read(e, buffers[bi++].second);
    } else {
      const auto x = e.shape.find('x');
      if (x == std::string::npos) throw CheckpointError("manifest: malformed library shape '" + e.shape + "'");
      const std::size_t rows = detail::parse_size(e.shape.substr(0, x), "library rows");
      const std::size_t len = detail::parse_size(e.shape.substr(x + 1), "library row length");
      if (len != s.library.row_length() || rows * len != e.count) {
        throw CheckpointError("library shape " + e.shape + " does not match the model");
      }
      std::vector<T> flat(e.count);
      read(e, flat);
      std::deque<std::vector<T>> r;
      for (std::size_t i = 0; i < rows; ++i) r.emplace_back(flat.begin() + i * len, flat.begin() + (i + 1) * len);
      try {
        s.library.restore(std::move(r));
      } catch (const ShapeError& err) {
        throw CheckpointError(std::string("library: ") + err.what());
      }
      have_library = true;
    }
  }
  if (pi != params.size()) throw CheckpointError("checkpoint is missing parameter '" + params[pi].name + "'");
  if (vi != 0 && vi != params.size()) throw CheckpointError("checkpoint velocity set is incomplete");
  if (bi != buffers.size()) throw CheckpointError("checkpoint is missing buffer '" + buffers[bi].first + "'");
  if (!have_library) throw CheckpointError("checkpoint is missing the saliency library");
  s.net.mark_stats_ready(stats_ready);
  return s;
}

}  // namespace dgc
