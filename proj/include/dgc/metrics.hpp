// SPDX-License-Identifier: Apache-2.0
//
// Per-epoch metrics stream. The first line is a comment recording the seed
// and run settings, the second the column header, then one row per epoch:
//
//   epoch, lr, prune_rate, threshold, loss, cross_entropy, lasso, angle,
//   train_accuracy, realized_prune_rate, mean_abs_cos, layer<i>_prune_rate...
//
// prune_rate is the scheduled rate, realized_prune_rate the measured fraction
// of deactivated (sample, head, channel) slots, threshold the global |g|
// threshold after the epoch. Numbers use 17 significant digits so rows parse
// back to the same doubles.
#pragma once

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dgc/config.hpp"
#include "dgc/trainer.hpp"

namespace dgc {

inline constexpr const char* kMetricsColumns =
    "epoch,lr,prune_rate,threshold,loss,cross_entropy,lasso,angle,train_accuracy,realized_prune_rate,mean_abs_cos";

inline std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_header(std::ostream& os, const TrainConfig& c, std::size_t dgc_layers) {
  os << "# seed=" << c.seed << " gating=" << (c.gating == GatingMode::Global ? "global" : "headwise")
     << " prune_rate=" << exact(c.prune_rate) << " epochs=" << c.epochs
     << " precision=" << (c.precision == Precision::Float ? "float" : "double") << "\n";
  os << kMetricsColumns;
  for (std::size_t i = 0; i < dgc_layers; ++i) os << ",layer" << i << "_prune_rate";
  os << "\n";
}

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << "," << exact(m.lr) << "," << exact(m.prune_rate) << "," << exact(m.threshold) << ","
     << exact(m.loss) << "," << exact(m.cross_entropy) << "," << exact(m.lasso) << "," << exact(m.angle) << ","
     << exact(m.accuracy) << "," << exact(m.realized_prune_rate) << "," << exact(m.mean_abs_cos);
  for (double r : m.layer_prune_rates) os << "," << exact(r);
  os << "\n";
}

/// Parses a metrics stream written by the functions above. Notes are not
/// part of the stream.
inline std::vector<EpochMetrics> read_metrics(std::istream& in) {
  std::vector<EpochMetrics> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line.rfind(kMetricsColumns, 0) != 0) throw std::runtime_error("metrics stream: unexpected header");
      header = true;
      continue;
    }
    std::vector<double> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
    if (f.size() < 11) throw std::runtime_error("metrics stream: short row '" + line + "'");
    EpochMetrics m;
    m.epoch = static_cast<std::size_t>(f[0]);
    m.lr = f[1];
    m.prune_rate = f[2];
    m.threshold = f[3];
    m.loss = f[4];
    m.cross_entropy = f[5];
    m.lasso = f[6];
    m.angle = f[7];
    m.accuracy = f[8];
    m.realized_prune_rate = f[9];
    m.mean_abs_cos = f[10];
    m.layer_prune_rates.assign(f.begin() + 11, f.end());
    rows.push_back(std::move(m));
  }
  return rows;
}

// Evaluation table: one row per layer, then a "network" row.
//
//   scope, kind, top1, realized_prune_rate, macs_per_sample, dense_macs_per_sample
//
// top1 is filled on the network row only; realized_prune_rate is 0 for
// layers without gating.
struct EvalRow {
  std::string scope;
  std::string kind;
  double top1 = 0;
  double prune_rate = 0;
  double macs = 0;
  double dense_macs = 0;

  bool operator==(const EvalRow&) const = default;
};

inline constexpr const char* kEvalColumns =
    "scope,kind,top1,realized_prune_rate,macs_per_sample,dense_macs_per_sample";

template <typename T>
std::vector<EvalRow> eval_rows(const Network<T>& net, const EvalMetrics& m) {
  std::vector<EvalRow> rows;
  std::size_t d = 0;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& b = net.blocks[i];
    const double rate = b.spec.kind == LayerKind::Dgc ? m.layer_prune_rates[d++] : 0.0;
    rows.push_back({std::to_string(i), kind_name(b.spec.kind), 0.0, rate, m.layer_macs[i],
                    static_cast<double>(m.layer_dense_macs[i])});
  }
  rows.push_back({"network", "all", m.accuracy, m.realized_prune_rate, m.macs_per_sample,
                  static_cast<double>(m.dense_macs_per_sample)});
  return rows;
}

inline void write_eval_table(std::ostream& os, const std::vector<EvalRow>& rows, const std::string& comment) {
  os << "# " << comment << "\n" << kEvalColumns << "\n";
  for (const auto& r : rows) {
    os << r.scope << "," << r.kind << "," << exact(r.top1) << "," << exact(r.prune_rate) << "," << exact(r.macs)
       << "," << exact(r.dense_macs) << "\n";
  }
}

inline std::vector<EvalRow> read_eval_table(std::istream& in) {
  std::vector<EvalRow> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kEvalColumns) throw std::runtime_error("eval table: unexpected header");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw std::runtime_error("eval table: malformed row '" + line + "'");
    rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
  }
  return rows;
}

}  // namespace dgc
