// SPDX-License-Identifier: Apache-2.0
//
// Plot-ready data about gating behaviour on a set of images:
//
//   saliency_l<L>_i<I>.csv     heads x channels saliency of image I at layer L
//   decision_l<L>_i<I>.pgm     same grid as a plain (P2) graymap; 255 (white)
//                              marks a deactivated channel, 0 an active one
//   deactivation_l<L>.csv      heads x channels fraction of images that
//                              deactivate the channel in that head
//   layer_prune_rates.csv      layer,prune_rate over the image set
//   contribution_l<L>.csv      out x in mean activation of the single-filter
//                              response, averaged over the image set
//
// L is the network layer index (DGC layers only), I the position in the set.
// CSV matrices start with one '#' comment line carrying the seed, then one
// row per line with 17 significant digits.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dgc/dataset.hpp"
#include "dgc/metrics.hpp"
#include "dgc/model.hpp"

namespace dgc {

using Matrix = std::vector<std::vector<double>>;

struct LayerVisualization {
  std::size_t layer = 0;                     // network layer index
  std::vector<Matrix> saliency;              // per image, heads x channels
  std::vector<std::vector<std::vector<bool>>> deactivated;  // per image, heads x channels
  Matrix deactivation_probability;           // heads x channels
  double prune_rate = 0;
  Matrix contribution;                       // out x in, empty unless requested
};

struct VisualizationBundle {
  std::vector<LayerVisualization> layers;
  std::size_t images = 0;
};

/// Valid layer indices for visualization (the DGC layers).
template <typename T>
std::vector<std::size_t> dgc_layer_indices(const Network<T>& net) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    if (net.blocks[i].spec.kind == LayerKind::Dgc) out.push_back(i);
  }
  return out;
}

template <typename T>
VisualizationBundle visualize(Network<T>& net, const Dataset& images, const GateSpec& gate,
                              std::vector<std::size_t> layers, bool contributions) {
  const auto valid = dgc_layer_indices(net);
  if (layers.empty()) layers = valid;
  for (std::size_t l : layers) {
    if (std::find(valid.begin(), valid.end(), l) == valid.end()) {
      std::string list;
      for (std::size_t v : valid) list += (list.empty() ? "" : ", ") + std::to_string(v);
      throw std::invalid_argument("layer " + std::to_string(l) + " is not a DGC layer; valid indices: " + list);
    }
  }
  if (images.size() == 0) throw std::invalid_argument("visualization image set is empty");
  if (!net.stats_ready()) throw StateError("visualization requested before batch-norm statistics were set");

  VisualizationBundle bundle;
  bundle.images = images.size();
  for (std::size_t l : layers) {
    LayerVisualization lv;
    lv.layer = l;
    const auto& b = net.blocks[l];
    lv.deactivation_probability.assign(b.dgc.config.heads, std::vector<double>(b.in_channels, 0.0));
    if (contributions) lv.contribution.assign(b.spec.out_channels, std::vector<double>(b.in_channels, 0.0));
    bundle.layers.push_back(std::move(lv));
  }

  net.set_training(false);
  std::vector<std::size_t> idx(1);
  for (std::size_t i = 0; i < images.size(); ++i) {
    idx[0] = i;
    const Batch<T> batch = make_batch<T>(images, idx);
    const ForwardPass<T> pass = net.forward(batch.images, gate);
    for (auto& lv : bundle.layers) {
      const auto& b = net.blocks[lv.layer];
      std::size_t d = 0;
      for (std::size_t j = 0; j < lv.layer; ++j) d += net.blocks[j].spec.kind == LayerKind::Dgc ? 1 : 0;
      const std::size_t heads = b.dgc.config.heads;
      const std::size_t c = b.in_channels;
      Matrix sal(heads, std::vector<double>(c));
      std::vector<std::vector<bool>> off(heads, std::vector<bool>(c, true));
      for (std::size_t h = 0; h < heads; ++h) {
        auto g = pass.saliency[d][h].sample(0);
        for (std::size_t ch = 0; ch < c; ++ch) sal[h][ch] = static_cast<double>(g[ch]);
        for (std::size_t ch : pass.decisions[d][0][h].indices) off[h][ch] = false;
        for (std::size_t ch = 0; ch < c; ++ch) lv.deactivation_probability[h][ch] += off[h][ch] ? 1.0 : 0.0;
      }
      if (!lv.contribution.empty()) {
        // Mean over the output map of one filter slice applied to one
        // (amplified) input channel; unselected pairs contribute 0.
        const auto& x = b.input;
        const auto& cfg = b.dgc.config;
        const ConvGeometry geo{1, x.shape().h, x.shape().w, cfg.kernel, cfg.stride, cfg.pad,
                               conv_out_extent(x.shape().h, cfg.kernel, cfg.stride, cfg.pad),
                               conv_out_extent(x.shape().w, cfg.kernel, cfg.stride, cfg.pad)};
        std::vector<T> col(geo.rows() * geo.cols());
        const std::size_t kk = cfg.kernel * cfg.kernel;
        const double area = static_cast<double>(geo.cols());
        for (std::size_t ch = 0; ch < c; ++ch) {
          im2col(x.channel(0, ch).data(), geo, col.data());
          std::vector<double> tap(kk, 0.0);
          for (std::size_t t = 0; t < kk; ++t) {
            for (std::size_t p = 0; p < geo.cols(); ++p) tap[t] += static_cast<double>(col[t * geo.cols() + p]);
          }
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& dec = pass.decisions[d][0][h];
            const auto it = std::find(dec.indices.begin(), dec.indices.end(), ch);
            if (it == dec.indices.end()) continue;
            const double a = static_cast<double>(dec.amplification[static_cast<std::size_t>(it - dec.indices.begin())]);
            const auto& bank = b.dgc.heads[h].filters;
            for (std::size_t s = 0; s < cfg.outputs_per_head(); ++s) {
              auto w = bank.channel(s, ch);
              double acc = 0;
              for (std::size_t t = 0; t < kk; ++t) acc += static_cast<double>(w[t]) * tap[t];
              lv.contribution[shuffled_position(h, s, heads)][ch] += a * acc / area;
            }
          }
        }
      }
      lv.saliency.push_back(std::move(sal));
      lv.deactivated.push_back(std::move(off));
    }
  }
  net.set_training(true);
  const double n = static_cast<double>(images.size());
  for (auto& lv : bundle.layers) {
    double total = 0;
    std::size_t cells = 0;
    for (auto& row : lv.deactivation_probability) {
      for (double& v : row) {
        v /= n;
        total += v;
        ++cells;
      }
    }
    lv.prune_rate = cells ? total / static_cast<double>(cells) : 0.0;
    for (auto& row : lv.contribution) {
      for (double& v : row) v /= n;
    }
  }
  return bundle;
}

inline void write_csv_matrix(const std::filesystem::path& path, const Matrix& m, const std::string& comment) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << "# " << comment << "\n";
  for (const auto& row : m) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << exact(row[j]);
    os << "\n";
  }
}

inline Matrix read_csv_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  Matrix m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    m.push_back(std::move(row));
  }
  return m;
}

/// Plain graymap: width = channels, height = heads.
inline void write_pgm(const std::filesystem::path& path, const std::vector<std::vector<bool>>& off,
                      const std::string& comment) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  const std::size_t h = off.size();
  const std::size_t w = h ? off[0].size() : 0;
  os << "P2\n# " << comment << "\n" << w << " " << h << "\n255\n";
  for (const auto& row : off) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "") << (row[j] ? 255 : 0);
    os << "\n";
  }
}

inline std::vector<std::vector<bool>> read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::string magic;
  in >> magic;
  if (magic != "P2") throw std::runtime_error("'" + path.string() + "' is not a plain graymap");
  auto next = [&in]() {
    std::string tok;
    while (in >> tok) {
      if (tok.front() == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return std::stoul(tok);
    }
    throw std::runtime_error("truncated graymap");
  };
  const std::size_t w = next();
  const std::size_t h = next();
  const std::size_t maxval = next();
  std::vector<std::vector<bool>> out(h, std::vector<bool>(w));
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t v = next();
      if (v != 0 && v != maxval) throw std::runtime_error("graymap holds a non-binary value");
      out[r][c] = v == maxval;
    }
  }
  return out;
}

inline void write_visualization(const VisualizationBundle& b, const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const std::string tag = "seed=" + std::to_string(seed);
  std::ofstream rates(dir / "layer_prune_rates.csv");
  if (!rates) throw std::runtime_error("cannot write into '" + dir.string() + "'");
  rates << "# " << tag << " images=" << b.images << "\nlayer,prune_rate\n";
  for (const auto& lv : b.layers) {
    const std::string l = std::to_string(lv.layer);
    rates << lv.layer << "," << exact(lv.prune_rate) << "\n";
    for (std::size_t i = 0; i < lv.saliency.size(); ++i) {
      const std::string suffix = "_l" + l + "_i" + std::to_string(i);
      const std::string what = tag + " layer=" + l + " image=" + std::to_string(i);
      write_csv_matrix(dir / ("saliency" + suffix + ".csv"), lv.saliency[i], what + " rows=heads cols=channels");
      write_pgm(dir / ("decision" + suffix + ".pgm"), lv.deactivated[i], what + " white=deactivated");
    }
    write_csv_matrix(dir / ("deactivation_l" + l + ".csv"), lv.deactivation_probability,
                     tag + " layer=" + l + " rows=heads cols=channels");
    if (!lv.contribution.empty()) {
      write_csv_matrix(dir / ("contribution_l" + l + ".csv"), lv.contribution,
                       tag + " layer=" + l + " rows=output channels cols=input channels");
    }
  }
}

}  // namespace dgc
