// SPDX-License-Identifier: Apache-2.0
//
// Forward-pass micro-benchmark of dense, standard group, and dynamic group
// convolution on identical inputs. DGC time is split into the saliency stage
// (pooling, generators, gating), the index stage (plan build and input
// gather), and the convolution stage.
//
// CSV columns:
//   variant, shape, in_channels, out_channels, height, width, kernel, threads,
//   warmups, repeats, inner, median_ms, q1_ms, q3_ms, saliency_ms, index_ms,
//   conv_ms
// Times are per forward pass; component columns are medians and are 0 for
// dense and SGC rows. `inner` > 1 means each timed sample averaged that many
// back-to-back passes because a single pass was too short to time.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dgc/dgc_layer.hpp"
#include "dgc/index_plan.hpp"
#include "dgc/metrics.hpp"
#include "dgc/ops.hpp"

namespace dgc {

struct BenchShape {
  std::size_t channels = 64;  // C = C'
  std::size_t extent = 56;    // H = W
  std::size_t kernel = 3;

  std::string label() const { return std::to_string(channels) + "x" + std::to_string(extent) + "x" + std::to_string(extent); }
};

/// Square layer shapes of the four ResNet-18 stages at 224x224 input.
inline std::vector<BenchShape> resnet18_shapes() {
  return {{64, 56, 3}, {128, 28, 3}, {256, 14, 3}, {512, 7, 3}};
}

/// Parses "64x56,128x28" (channels x spatial extent).
inline std::vector<BenchShape> parse_bench_shapes(const std::string& text) {
  std::vector<BenchShape> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    BenchShape s;
    try {
      if (x == std::string::npos) throw std::invalid_argument(item);
      s.channels = std::stoul(item.substr(0, x));
      s.extent = std::stoul(item.substr(x + 1));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("bench shape '" + item + "': expected <channels>x<extent>");
    }
    if (s.channels == 0 || s.extent == 0) throw std::invalid_argument("bench shape '" + item + "': must be positive");
    out.push_back(s);
  }
  if (out.empty()) throw std::invalid_argument("no bench shapes given");
  return out;
}

enum class VariantKind { Dense, Sgc, Dgc };

struct BenchVariant {
  VariantKind kind = VariantKind::Dense;
  std::size_t groups = 4;
  double prune_rate = 0.75;
  std::size_t heads = 4;
  std::size_t squeeze = 16;

  std::string name() const {
    switch (kind) {
      case VariantKind::Dense: return "dense";
      case VariantKind::Sgc: return "sgc_g" + std::to_string(groups);
      case VariantKind::Dgc: {
        std::ostringstream os;
        os << "dgc_xi" << prune_rate << "_h" << heads;
        return os.str();
      }
    }
    return "?";
  }
};

inline std::vector<BenchVariant> default_variants() {
  return {{VariantKind::Dense}, {VariantKind::Sgc, 4}, {VariantKind::Dgc, 1, 0.75, 4, 16}};
}

struct BenchOptions {
  std::size_t threads = 1;
  std::size_t warmups = 5;
  std::size_t repeats = 30;
  std::uint64_t seed = 1;
  double min_sample_ms = 1.0;  // shorter passes are repeated within a sample
};

struct BenchResult {
  std::string variant;
  BenchShape shape;
  std::size_t threads = 1;
  std::size_t warmups = 0;
  std::size_t repeats = 0;
  std::size_t inner = 1;
  double median_ms = 0, q1_ms = 0, q3_ms = 0;
  double saliency_ms = 0, index_ms = 0, conv_ms = 0;

  double component_sum() const { return saliency_ms + index_ms + conv_ms; }
};

namespace detail {

/// Linear-interpolated quantile of a sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

using Clock = std::chrono::steady_clock;

inline double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

/// A volatile sink so timed results are not optimized away.
inline volatile float g_sink = 0;

}  // namespace detail

/// One variant on one shape: owns its weights and input and times single
/// samples on demand so callers can interleave variants.
class VariantTimer {
 public:
  VariantTimer(const BenchShape& shape, const BenchVariant& v, const BenchOptions& opt)
      : v_(v), opt_(opt), x_(1, shape.channels, shape.extent, shape.extent) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (float& f : x_.span()) f = static_cast<float>(nd(rng));
    const std::size_t k = shape.kernel;
    const std::size_t pad = k / 2;
    r_.variant = v.name();
    r_.shape = shape;
    r_.threads = opt.threads;
    r_.warmups = opt.warmups;
    r_.repeats = opt.repeats;
    switch (v.kind) {
      case VariantKind::Dense:
        dense_ = {Tensor<float>(shape.channels, shape.channels, k, k), 1, pad};
        for (float& f : dense_.weights.span()) f = static_cast<float>(nd(rng));
        break;
      case VariantKind::Sgc:
        grouped_ = {Tensor<float>(shape.channels, shape.channels / v.groups, k, k), 1, pad};
        for (float& f : grouped_.weights.span()) f = static_cast<float>(nd(rng));
        break;
      case VariantKind::Dgc: {
        DgcLayerConfig cfg;
        cfg.in_channels = shape.channels;
        cfg.out_channels = shape.channels;
        cfg.kernel = k;
        cfg.pad = pad;
        cfg.heads = v.heads;
        cfg.squeeze = v.squeeze;
        cfg.prune_rate = v.prune_rate;
        layer_ = init_dgc_layer<float>(cfg, rng);
        break;
      }
    }
  }

  /// Runs the warm-up passes and picks the inner repeat count.
  void warm_up() {
    for (std::size_t i = 0; i < opt_.warmups; ++i) {
      double s[3] = {0, 0, 0};
      pass(s);
    }
    double s[3] = {0, 0, 0};
    const auto t0 = detail::Clock::now();
    pass(s);
    const double one = detail::ms_between(t0, detail::Clock::now());
    if (one < opt_.min_sample_ms) {
      r_.inner = static_cast<std::size_t>(std::ceil(opt_.min_sample_ms / std::max(one, 1e-6)));
    }
  }

  void sample() {
    double s[3] = {0, 0, 0};
    const auto t0 = detail::Clock::now();
    for (std::size_t i = 0; i < r_.inner; ++i) pass(s);
    const double elapsed = detail::ms_between(t0, detail::Clock::now());
    const double inner = static_cast<double>(r_.inner);
    total_.push_back(elapsed / inner);
    sal_.push_back(s[0] / inner);
    idx_.push_back(s[1] / inner);
    conv_.push_back(s[2] / inner);
  }

  BenchResult result() const {
    BenchResult r = r_;
    r.median_ms = detail::quantile(total_, 0.5);
    r.q1_ms = detail::quantile(total_, 0.25);
    r.q3_ms = detail::quantile(total_, 0.75);
    if (v_.kind == VariantKind::Dgc) {
      r.saliency_ms = detail::quantile(sal_, 0.5);
      r.index_ms = detail::quantile(idx_, 0.5);
      r.conv_ms = detail::quantile(conv_, 0.5);
    }
    return r;
  }

 private:
  // One pass, accumulating per-stage durations (saliency, index, conv).
  void pass(double* stages) {
    using detail::Clock;
    using detail::ms_between;
    const auto t0 = Clock::now();
    if (v_.kind == VariantKind::Dense) {
      const auto y = conv2d_forward(x_, dense_, opt_.threads);
      detail::g_sink = y[0];
      stages[2] += ms_between(t0, Clock::now());
      return;
    }
    if (v_.kind == VariantKind::Sgc) {
      const auto y = sgc_forward(x_, grouped_, v_.groups, opt_.threads);
      detail::g_sink = y[0];
      stages[2] += ms_between(t0, Clock::now());
      return;
    }
    const GateSpec spec = GateSpec::head_wise(v_.prune_rate);
    const Tensor<float> pooled = global_avg_pool(x_);
    std::vector<std::vector<GateDecision<float>>> decisions(1);
    for (const auto& head : layer_.heads) {
      const auto sb = saliency_from_pooled(pooled, head, spec.keep_sign());
      decisions[0].push_back(apply_gate<float>(sb.row(0), spec));
    }
    const auto t1 = Clock::now();
    const auto plan = build_index_plan(layer_, x_.shape(), decisions);
    const auto gathered = gather_inputs(plan, x_);
    const auto t2 = Clock::now();
    const auto y = convolve_gathered(plan, gathered);
    detail::g_sink = y[0];
    const auto t3 = Clock::now();
    stages[0] += ms_between(t0, t1);
    stages[1] += ms_between(t1, t2);
    stages[2] += ms_between(t2, t3);
  }

  BenchVariant v_;
  BenchOptions opt_;
  Tensor<float> x_;
  BenchResult r_;
  ConvFilter<float> dense_;
  ConvFilter<float> grouped_;
  DgcLayerState<float> layer_;
  std::vector<double> total_, sal_, idx_, conv_;
};

inline BenchResult run_variant(const BenchShape& shape, const BenchVariant& v, const BenchOptions& opt) {
  VariantTimer t(shape, v, opt);
  t.warm_up();
  for (std::size_t rep = 0; rep < opt.repeats; ++rep) t.sample();
  return t.result();
}

/// Repeats are interleaved round-robin across the variants of a shape so slow
/// drift in machine load affects them alike.
inline std::vector<BenchResult> run_benchmark(const std::vector<BenchShape>& shapes,
                                              const std::vector<BenchVariant>& variants, const BenchOptions& opt) {
  for (const auto& s : shapes) {
    for (const auto& v : variants) {
      if (v.kind == VariantKind::Sgc && (v.groups == 0 || s.channels % v.groups != 0)) {
        throw ShapeError("bench: " + s.label() + " not divisible into " + std::to_string(v.groups) + " groups");
      }
      if (v.kind == VariantKind::Dgc && (v.heads == 0 || s.channels % v.heads != 0 || s.channels % v.squeeze != 0)) {
        throw ShapeError("bench: " + s.label() + " incompatible with " + v.name());
      }
    }
  }
  std::vector<BenchResult> out;
  for (const auto& s : shapes) {
    std::vector<VariantTimer> timers;
    for (const auto& v : variants) timers.emplace_back(s, v, opt);
    for (auto& t : timers) t.warm_up();
    for (std::size_t rep = 0; rep < opt.repeats; ++rep)
      for (auto& t : timers) t.sample();
    for (const auto& t : timers) out.push_back(t.result());
  }
  return out;
}

inline constexpr const char* kBenchColumns =
    "variant,shape,in_channels,out_channels,height,width,kernel,threads,warmups,repeats,inner,median_ms,q1_ms,q3_ms,"
    "saliency_ms,index_ms,conv_ms";

inline void write_bench_csv(std::ostream& os, const std::vector<BenchResult>& rows, std::uint64_t seed) {
  os << "# seed=" << seed << "\n" << kBenchColumns << "\n";
  for (const auto& r : rows) {
    os << r.variant << "," << r.shape.label() << "," << r.shape.channels << "," << r.shape.channels << ","
       << r.shape.extent << "," << r.shape.extent << "," << r.shape.kernel << "," << r.threads << "," << r.warmups
       << "," << r.repeats << "," << r.inner << "," << exact(r.median_ms) << "," << exact(r.q1_ms) << ","
       << exact(r.q3_ms) << "," << exact(r.saliency_ms) << "," << exact(r.index_ms) << "," << exact(r.conv_ms)
       << "\n";
  }
}

inline std::vector<BenchResult> read_bench_csv(std::istream& in) {
  std::vector<BenchResult> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kBenchColumns) throw std::runtime_error("bench table: unexpected header");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 17) throw std::runtime_error("bench table: malformed row '" + line + "'");
    BenchResult r;
    r.variant = f[0];
    r.shape.channels = std::stoul(f[2]);
    r.shape.extent = std::stoul(f[4]);
    r.shape.kernel = std::stoul(f[6]);
    r.threads = std::stoul(f[7]);
    r.warmups = std::stoul(f[8]);
    r.repeats = std::stoul(f[9]);
    r.inner = std::stoul(f[10]);
    r.median_ms = std::stod(f[11]);
    r.q1_ms = std::stod(f[12]);
    r.q3_ms = std::stod(f[13]);
    r.saliency_ms = std::stod(f[14]);
    r.index_ms = std::stod(f[15]);
    r.conv_ms = std::stod(f[16]);
    rows.push_back(r);
  }
  return rows;
}

/// Checks SGC <= DGC <= dense on medians for every shape that has all three.
/// Returns an empty string when the ordering holds, else a description.
inline std::string check_ordering(const std::vector<BenchResult>& rows) {
  std::string problems;
  std::vector<std::string> labels;
  for (const auto& r : rows) {
    if (std::find(labels.begin(), labels.end(), r.shape.label()) == labels.end()) labels.push_back(r.shape.label());
  }
  for (const auto& label : labels) {
    const BenchResult *dense = nullptr, *sgc = nullptr, *dgc = nullptr;
    for (const auto& r : rows) {
      if (r.shape.label() != label) continue;
      if (r.variant == "dense") dense = &r;
      else if (r.variant.rfind("sgc", 0) == 0) sgc = &r;
      else if (r.variant.rfind("dgc", 0) == 0) dgc = &r;
    }
    if (!dense || !sgc || !dgc) continue;
    if (!(sgc->median_ms <= dgc->median_ms && dgc->median_ms <= dense->median_ms)) {
      problems += label + ": sgc " + exact(sgc->median_ms) + " ms, dgc " + exact(dgc->median_ms) + " ms, dense " +
                  exact(dense->median_ms) + " ms; ";
    }
  }
  return problems;
}

}  // namespace dgc
