// SPDX-License-Identifier: Apache-2.0
//
// Dynamic group convolution layer.
//
// Every head owns a squeeze-expand saliency generator over globally pooled
// input statistics and a filter bank producing out_channels / heads outputs.
// Per sample, a head keeps the input channels with the largest saliencies,
// scales them by those saliencies, and convolves them with the matching
// in-channel slices of its filters. Head outputs are concatenated and
// interleaved by a channel shuffle, so the output shape never depends on the
// pruning rate.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dgc/ops.hpp"
#include "dgc/parallel.hpp"
#include "dgc/tensor.hpp"

namespace dgc {

struct DgcLayerConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  std::size_t heads = 4;
  std::size_t squeeze = 16;
  double prune_rate = 0.75;
  double lasso = 1e-5;

  std::size_t squeezed() const { return in_channels / squeeze; }
  std::size_t outputs_per_head() const { return out_channels / heads; }

  void validate() const {
    const std::string where = "dgc layer " + std::to_string(in_channels) + "->" +
                              std::to_string(out_channels) + ": ";
    require(in_channels > 0 && out_channels > 0, where + "channel counts must be positive");
    require(kernel >= 1 && stride >= 1, where + "kernel and stride must be >= 1");
    require(heads >= 1 && out_channels % heads == 0,
            where + "out channels must be divisible by the head count " + std::to_string(heads));
    require(squeeze >= 1 && in_channels % squeeze == 0,
            where + "in channels must be divisible by the squeeze rate " + std::to_string(squeeze));
    require(prune_rate >= 0.0 && prune_rate < 1.0, where + "pruning rate must lie in [0, 1)");
  }
};

/// Number of channels kept by a head: ceil((1 - rate) * channels), at least one.
/// A relative slack of 1e-9 absorbs representation error in products such as
/// (1 - 0.7) * 10.
inline std::size_t keep_count(std::size_t channels, double prune_rate) {
  const double raw = (1.0 - prune_rate) * static_cast<double>(channels);
  const auto kept = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(kept, 1, channels);
}

template <typename T>
struct HeadParams {
  Linear<T> squeeze;   // C -> C/d
  Linear<T> expand;    // C/d -> C; expand.bias is the saliency bias
  Tensor<T> filters;   // (C'/H, C, k, k)
};

template <typename T>
struct DgcLayerState {
  DgcLayerConfig config;
  std::vector<HeadParams<T>> heads;
};

template <typename T, typename Rng>
DgcLayerState<T> init_dgc_layer(const DgcLayerConfig& cfg, Rng& rng, T bias_init = T(0.1)) {
  cfg.validate();
  auto fill_normal = [&rng](std::span<T> dst, double fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (T& v : dst) v = static_cast<T>(dist(rng));
  };
  DgcLayerState<T> layer{cfg, {}};
  const std::size_t c = cfg.in_channels;
  const std::size_t k = cfg.kernel;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    HeadParams<T> head{Linear<T>(c, cfg.squeezed()), Linear<T>(cfg.squeezed(), c),
                       Tensor<T>(cfg.outputs_per_head(), c, k, k)};
    fill_normal(head.squeeze.weight, static_cast<double>(c));
    fill_normal(head.expand.weight, static_cast<double>(cfg.squeezed()));
    std::fill(head.expand.bias.begin(), head.expand.bias.end(), bias_init);
    fill_normal(head.filters.span(), static_cast<double>(c * k * k));
    layer.heads.push_back(std::move(head));
  }
  return layer;
}

// ---------------------------------------------------------------------------
// Saliency generation

/// Saliencies of one head for a batch: g is (N, C, 1, 1). The intermediate
/// pre-activations are kept for the backward pass.
template <typename T>
struct SaliencyBatch {
  Tensor<T> pooled;       // (N, C)
  Tensor<T> hidden_pre;   // (N, C/d)
  Tensor<T> saliency_pre; // (N, C)
  Tensor<T> saliency;     // (N, C)
  bool keep_sign = false;

  std::span<const T> row(std::size_t n) const { return saliency.sample(n); }
};

template <typename T>
SaliencyBatch<T> saliency_from_pooled(const Tensor<T>& pooled, const HeadParams<T>& head,
                                      bool keep_sign) {
  SaliencyBatch<T> out;
  out.keep_sign = keep_sign;
  out.pooled = pooled;
  out.hidden_pre = linear_forward(pooled, head.squeeze);
  out.saliency_pre = linear_forward(relu_forward(out.hidden_pre), head.expand);
  out.saliency = keep_sign ? out.saliency_pre : relu_forward(out.saliency_pre);
  return out;
}

/// g = outer(W_expand relu(W_squeeze avgpool(x) + b) + beta), outer = ReLU
/// unless keep_sign is set.
template <typename T>
SaliencyBatch<T> saliency_forward(const Tensor<T>& x, const HeadParams<T>& head, bool keep_sign) {
  require(x.shape().c == head.squeeze.in,
          "saliency generator expects " + std::to_string(head.squeeze.in) + " channels, input is " +
              x.shape().str());
  return saliency_from_pooled(global_avg_pool(x), head, keep_sign);
}

// ---------------------------------------------------------------------------
// Gating

template <typename T>
struct GateDecision {
  std::vector<std::size_t> indices;  // strictly increasing
  std::vector<T> amplification;      // saliency at each selected index
  T threshold = T(0);
};

/// Keeps the ceil((1 - rate) * C) largest saliencies; ties go to the lower
/// channel index. The reported threshold is the smallest kept saliency.
template <typename T>
GateDecision<T> headwise_gate(std::span<const T> g, double prune_rate) {
  require(prune_rate >= 0.0 && prune_rate < 1.0, "pruning rate must lie in [0, 1)");
  const std::size_t c = g.size();
  GateDecision<T> d;
  if (c == 0) return d;
  const std::size_t keep = keep_count(c, prune_rate);
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&g](std::size_t a, std::size_t b) { return g[a] > g[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  d.indices = std::move(order);
  d.amplification.reserve(keep);
  d.threshold = g[d.indices.front()];
  for (std::size_t i : d.indices) {
    d.amplification.push_back(g[i]);
    d.threshold = std::min(d.threshold, g[i]);
  }
  return d;
}

/// Keeps every channel whose absolute saliency reaches the global threshold.
/// Amplification keeps the sign; the selection may be empty.
template <typename T>
GateDecision<T> global_gate(std::span<const T> g, T threshold) {
  GateDecision<T> d;
  d.threshold = threshold;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(std::abs(g[i]) < threshold)) {
      d.indices.push_back(i);
      d.amplification.push_back(g[i]);
    }
  }
  return d;
}

/// Channels of sample n listed in the decision, each scaled by its saliency.
template <typename T>
Tensor<T> select_and_amplify(const Tensor<T>& x, std::size_t n, const GateDecision<T>& d) {
  const Shape& s = x.shape();
  require(n < s.n, "select_and_amplify: sample index out of range");
  Tensor<T> y(1, d.indices.size(), s.h, s.w);
  for (std::size_t j = 0; j < d.indices.size(); ++j) {
    if (d.indices[j] >= s.c) {
      throw ShapeError("select_and_amplify: channel index " + std::to_string(d.indices[j]) +
                       " out of range for " + s.str());
    }
    auto src = x.channel(n, d.indices[j]);
    auto dst = y.channel(0, j);
    const T a = d.amplification[j];
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * a;
  }
  return y;
}

template <typename T>
Tensor<T> select_and_amplify(const Tensor<T>& x, const GateDecision<T>& d) {
  return select_and_amplify(x, 0, d);
}

/// Restricts a filter bank (O, C, k, k) to the listed in-channel slices.
template <typename T>
Tensor<T> gather_filters(const Tensor<T>& bank, std::span<const std::size_t> indices) {
  const Shape& s = bank.shape();
  for (std::size_t idx : indices) {
    if (idx >= s.c) {
      throw ShapeError("gather_filters: index " + std::to_string(idx) + " out of range for bank " + s.str());
    }
  }
  Tensor<T> out(s.n, indices.size(), s.h, s.w);
  for (std::size_t o = 0; o < s.n; ++o) {
    for (std::size_t j = 0; j < indices.size(); ++j) {
      auto src = bank.channel(o, indices[j]);
      std::copy(src.begin(), src.end(), out.channel(o, j).begin());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel shuffle

/// Position of the channel produced by (head, slot) after the shuffle.
inline std::size_t shuffled_position(std::size_t head, std::size_t slot, std::size_t heads) {
  return slot * heads + head;
}

/// Transpose-reshape shuffle: channel (head h, slot s) moves to s * heads + h.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (heads == 0 || s.c % heads != 0) {
    throw ShapeError("channel_shuffle: " + std::to_string(s.c) + " channels not divisible by " +
                     std::to_string(heads) + " groups");
  }
  const std::size_t per = s.c / heads;
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t slot = 0; slot < per; ++slot) {
        auto src = x.channel(n, h * per + slot);
        std::copy(src.begin(), src.end(), out.channel(n, shuffled_position(h, slot, heads)).begin());
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> channel_unshuffle(const Tensor<T>& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (heads == 0 || s.c % heads != 0) {
    throw ShapeError("channel_unshuffle: " + std::to_string(s.c) + " channels not divisible by " +
                     std::to_string(heads) + " groups");
  }
  const std::size_t per = s.c / heads;
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t slot = 0; slot < per; ++slot) {
        auto src = x.channel(n, shuffled_position(h, slot, heads));
        std::copy(src.begin(), src.end(), out.channel(n, h * per + slot).begin());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class GatingMode { HeadWise, Global };

struct GateSpec {
  GatingMode mode = GatingMode::HeadWise;
  double prune_rate = 0.0;   // head-wise top-k rate
  double threshold = 0.0;    // global |g| threshold

  static GateSpec head_wise(double rate) { return {GatingMode::HeadWise, rate, 0.0}; }
  static GateSpec global(double thr) { return {GatingMode::Global, 0.0, thr}; }
  bool keep_sign() const { return mode == GatingMode::Global; }
};

template <typename T>
GateDecision<T> apply_gate(std::span<const T> g, const GateSpec& spec) {
  return spec.mode == GatingMode::HeadWise ? headwise_gate<T>(g, spec.prune_rate)
                                           : global_gate<T>(g, static_cast<T>(spec.threshold));
}

/// Convolves one sample of one head given its decision. Writes
/// outputs_per_head x out_h x out_w values to `out`. The inference index plan
/// executes through this same routine.
template <typename T>
void dgc_head_conv(const Tensor<T>& x, std::size_t n, const GateDecision<T>& d,
                   const Tensor<T>& gathered_filters, const DgcLayerConfig& cfg,
                   std::span<T> out) {
  if (d.indices.empty()) {
    std::fill(out.begin(), out.end(), T(0));
    return;
  }
  const Tensor<T> y = select_and_amplify(x, n, d);
  ConvFilter<T> w{gathered_filters, cfg.stride, cfg.pad};
  const ConvGeometry g = conv_geometry(y.shape(), w);
  std::vector<T> col(g.rows() * g.cols());
  conv2d_sample(y.data(), w, g, col.data(), out.data());
}

template <typename T>
struct DgcCache {
  Tensor<T> input;
  std::vector<SaliencyBatch<T>> saliency;               // per head
  std::vector<std::vector<GateDecision<T>>> decisions;  // [sample][head]
  GateSpec spec;
  bool valid = false;
};

template <typename T>
struct DgcOutput {
  Tensor<T> output;
  std::vector<Tensor<T>> saliency;                      // per head, (N, C, 1, 1)
  std::vector<std::vector<GateDecision<T>>> decisions;  // [sample][head]
};

/// Output extent (N, C', H', W') of a DGC layer for a given input shape.
inline Shape dgc_output_shape(const Shape& in, const DgcLayerConfig& cfg) {
  return {in.n, cfg.out_channels, conv_out_extent(in.h, cfg.kernel, cfg.stride, cfg.pad),
          conv_out_extent(in.w, cfg.kernel, cfg.stride, cfg.pad)};
}

/// Runs the per-sample head convolutions for precomputed decisions.
template <typename T>
Tensor<T> dgc_execute(const Tensor<T>& x, const DgcLayerState<T>& layer,
                      const std::vector<std::vector<GateDecision<T>>>& decisions,
                      std::size_t threads = 1) {
  const auto& cfg = layer.config;
  const Shape os = dgc_output_shape(x.shape(), cfg);
  require(decisions.size() == x.shape().n, "dgc_execute: one decision row per sample required");
  Tensor<T> out(os);
  const std::size_t per = cfg.outputs_per_head();
  const std::size_t plane = os.plane();
  parallel_for(os.n, threads, [&](std::size_t n) {
    std::vector<T> head_out(per * plane);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto& d = decisions[n][h];
      dgc_head_conv(x, n, d, gather_filters(layer.heads[h].filters, d.indices), cfg,
                    std::span<T>(head_out));
      for (std::size_t s = 0; s < per; ++s) {
        std::copy_n(head_out.data() + s * plane, plane,
                    out.channel(n, shuffled_position(h, s, cfg.heads)).begin());
      }
    }
  });
  return out;
}

template <typename T>
DgcOutput<T> dgc_forward(const Tensor<T>& x, const DgcLayerState<T>& layer, const GateSpec& spec,
                         DgcCache<T>* cache = nullptr, std::size_t threads = 1) {
  const auto& cfg = layer.config;
  require(x.shape().c == cfg.in_channels, "dgc_forward: layer expects " +
                                              std::to_string(cfg.in_channels) +
                                              " channels, input is " + x.shape().str());
  require(layer.heads.size() == cfg.heads, "dgc_forward: layer state has " +
                                               std::to_string(layer.heads.size()) + " heads, config " +
                                               std::to_string(cfg.heads));
  const std::size_t batch = x.shape().n;
  const Tensor<T> pooled = global_avg_pool(x);
  std::vector<SaliencyBatch<T>> sal;
  sal.reserve(cfg.heads);
  for (const auto& head : layer.heads) sal.push_back(saliency_from_pooled(pooled, head, spec.keep_sign()));

  DgcOutput<T> result;
  result.decisions.assign(batch, std::vector<GateDecision<T>>(cfg.heads));
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      result.decisions[n][h] = apply_gate<T>(sal[h].row(n), spec);
    }
  }
  result.output = dgc_execute(x, layer, result.decisions, threads);
  for (const auto& s : sal) result.saliency.push_back(s.saliency);
  if (cache != nullptr) {
    cache->input = x;
    cache->saliency = std::move(sal);
    cache->decisions = result.decisions;
    cache->spec = spec;
    cache->valid = true;
  }
  return result;
}

template <typename T>
struct HeadGrads {
  std::vector<T> squeeze_weight, squeeze_bias, expand_weight, expand_bias;
  Tensor<T> filters;

  explicit HeadGrads(const HeadParams<T>& p)
      : squeeze_weight(p.squeeze.weight.size(), T(0)),
        squeeze_bias(p.squeeze.bias.size(), T(0)),
        expand_weight(p.expand.weight.size(), T(0)),
        expand_bias(p.expand.bias.size(), T(0)),
        filters(p.filters.shape()) {}

  void add(const HeadGrads& o) {
    auto acc = [](std::vector<T>& a, const std::vector<T>& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    acc(squeeze_weight, o.squeeze_weight);
    acc(squeeze_bias, o.squeeze_bias);
    acc(expand_weight, o.expand_weight);
    acc(expand_bias, o.expand_bias);
    acc(filters.storage(), o.filters.storage());
  }
};

template <typename T>
struct DgcGrads {
  Tensor<T> input;
  std::vector<HeadGrads<T>> heads;
};

/// Backward of one head's saliency generator for one sample given dL/dg.
/// Accumulates parameter gradients and returns dL/dpooled.
template <typename T>
std::vector<T> saliency_backward_sample(const SaliencyBatch<T>& sb, std::size_t n,
                                        const HeadParams<T>& head, std::span<const T> grad_g,
                                        HeadGrads<T>& grads) {
  const std::size_t c = head.expand.out;
  const std::size_t r = head.squeeze.out;
  auto pre = sb.saliency_pre.sample(n);
  auto hid = sb.hidden_pre.sample(n);
  auto pooled = sb.pooled.sample(n);
  std::vector<T> dz(c);
  for (std::size_t i = 0; i < c; ++i) {
    dz[i] = (sb.keep_sign || pre[i] > T(0)) ? grad_g[i] : T(0);
  }
  std::vector<T> dhidden(r, T(0));
  for (std::size_t i = 0; i < c; ++i) {
    grads.expand_bias[i] += dz[i];
    const T* w = head.expand.weight.data() + i * r;
    T* dw = grads.expand_weight.data() + i * r;
    for (std::size_t j = 0; j < r; ++j) {
      const T a = hid[j] > T(0) ? hid[j] : T(0);
      dw[j] += dz[i] * a;
      dhidden[j] += dz[i] * w[j];
    }
  }
  std::vector<T> dpooled(c, T(0));
  for (std::size_t j = 0; j < r; ++j) {
    const T ds = hid[j] > T(0) ? dhidden[j] : T(0);
    grads.squeeze_bias[j] += ds;
    const T* w = head.squeeze.weight.data() + j * c;
    T* dw = grads.squeeze_weight.data() + j * c;
    for (std::size_t i = 0; i < c; ++i) {
      dw[i] += ds * pooled[i];
      dpooled[i] += ds * w[i];
    }
  }
  return dpooled;
}

/// Gradients through selection (indices held constant), amplification,
/// gathered convolution, and the saliency generators. Filter slices of
/// channels a sample did not select receive no contribution from it.
/// `saliency_grad`, when non-empty, adds per-head dL/dg from loss terms on
/// the saliencies (lasso, angle).
template <typename T>
DgcGrads<T> dgc_backward(const DgcCache<T>& cache, const DgcLayerState<T>& layer,
                         const Tensor<T>& grad_out,
                         const std::vector<Tensor<T>>& saliency_grad = {},
                         std::size_t threads = 1) {
  if (!cache.valid) throw StateError("dgc_backward called without a forward cache");
  const auto& cfg = layer.config;
  const Tensor<T>& x = cache.input;
  const Shape& xs = x.shape();
  const Shape os = dgc_output_shape(xs, cfg);
  if (grad_out.shape() != os) {
    throw ShapeError("dgc_backward: grad_out " + grad_out.shape().str() + " expected " + os.str());
  }
  require(saliency_grad.empty() || saliency_grad.size() == cfg.heads,
          "dgc_backward: saliency gradient must have one entry per head");

  const std::size_t per = cfg.outputs_per_head();
  const std::size_t plane = os.plane();
  const std::size_t k = cfg.kernel;
  const std::size_t kk = k * k;
  const std::size_t c = cfg.in_channels;

  DgcGrads<T> result{Tensor<T>(xs), {}};
  for (const auto& hp : layer.heads) result.heads.emplace_back(hp);

  const std::size_t chunks = chunk_count(xs.n);
  std::vector<std::vector<HeadGrads<T>>> partial(chunks);
  for (auto& p : partial) {
    for (const auto& hp : layer.heads) p.emplace_back(hp);
  }

  parallel_for(chunks, threads, [&](std::size_t ch) {
    for (std::size_t n = ch * kReduceChunk; n < std::min(xs.n, (ch + 1) * kReduceChunk); ++n) {
      auto dx = result.input.sample(n);
      std::vector<T> dpooled_total(c, T(0));
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto& d = cache.decisions[n][h];
        const auto& head = layer.heads[h];
        HeadGrads<T>& hg = partial[ch][h];
        std::vector<T> dg(c, T(0));
        const std::size_t sel = d.indices.size();
        if (sel > 0) {
          std::vector<T> dout(per * plane);
          for (std::size_t s = 0; s < per; ++s) {
            auto src = grad_out.channel(n, shuffled_position(h, s, cfg.heads));
            std::copy(src.begin(), src.end(), dout.begin() + static_cast<std::ptrdiff_t>(s * plane));
          }
          const Tensor<T> y = select_and_amplify(x, n, d);
          ConvFilter<T> w{gather_filters(head.filters, d.indices), cfg.stride, cfg.pad};
          const ConvGeometry g = conv_geometry(y.shape(), w);
          std::vector<T> col(g.rows() * g.cols());
          std::vector<T> dw(w.weights.size(), T(0));
          Tensor<T> dy(y.shape());
          conv2d_backward_sample(y.data(), w, g, dout.data(), col.data(), dy.data(), dw.data());
          for (std::size_t o = 0; o < per; ++o) {
            for (std::size_t j = 0; j < sel; ++j) {
              const T* src = dw.data() + (o * sel + j) * kk;
              T* dst = hg.filters.channel(o, d.indices[j]).data();
              for (std::size_t q = 0; q < kk; ++q) dst[q] += src[q];
            }
          }
          for (std::size_t j = 0; j < sel; ++j) {
            const std::size_t ci = d.indices[j];
            auto xin = x.channel(n, ci);
            auto dyj = dy.channel(0, j);
            T* dxc = dx.data() + ci * xs.plane();
            const T a = d.amplification[j];
            T dgj = 0;
            for (std::size_t i = 0; i < xin.size(); ++i) {
              dxc[i] += dyj[i] * a;
              dgj += dyj[i] * xin[i];
            }
            dg[ci] = dgj;
          }
        }
        if (!saliency_grad.empty()) {
          auto extra = saliency_grad[h].sample(n);
          for (std::size_t i = 0; i < c; ++i) dg[i] += extra[i];
        }
        const auto dp = saliency_backward_sample(cache.saliency[h], n, head, std::span<const T>(dg), hg);
        for (std::size_t i = 0; i < c; ++i) dpooled_total[i] += dp[i];
      }
      const T inv = T(1) / static_cast<T>(xs.plane());
      for (std::size_t ci = 0; ci < c; ++ci) {
        T* dxc = dx.data() + ci * xs.plane();
        const T v = dpooled_total[ci] * inv;
        for (std::size_t i = 0; i < xs.plane(); ++i) dxc[i] += v;
      }
    }
  });
  for (const auto& p : partial) {
    for (std::size_t h = 0; h < cfg.heads; ++h) result.heads[h].add(p[h]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Loss terms on saliencies

/// Saliencies of one network pass: [layer][head] -> (N, C_l, 1, 1).
template <typename T>
using SaliencySet = std::vector<std::vector<Tensor<T>>>;

inline std::size_t total_heads(const auto& set) {
  std::size_t heads = 0;
  for (const auto& layer : set) heads += layer.size();
  return heads;
}

/// lambda / (L H) * sum_l sum_i ||g^{l,i}||_1, averaged over the batch.
template <typename T>
T lasso_loss(const SaliencySet<T>& set, double lambda) {
  const std::size_t heads = total_heads(set);
  if (heads == 0) return T(0);
  T total = 0;
  std::size_t batch = 0;
  for (const auto& layer : set) {
    for (const auto& g : layer) {
      batch = g.shape().n;
      for (T v : g.span()) total += std::abs(v);
    }
  }
  if (batch == 0) return T(0);
  return static_cast<T>(lambda) * total / static_cast<T>(heads * batch);
}

/// dL/dg of the lasso term (sign(g) scaled; zero at g == 0).
template <typename T>
SaliencySet<T> lasso_grad(const SaliencySet<T>& set, double lambda) {
  SaliencySet<T> out;
  const std::size_t heads = total_heads(set);
  for (const auto& layer : set) {
    auto& ol = out.emplace_back();
    for (const auto& g : layer) {
      Tensor<T> d(g.shape());
      const T scale = static_cast<T>(lambda) / static_cast<T>(heads * std::max<std::size_t>(1, g.shape().n));
      for (std::size_t i = 0; i < g.size(); ++i) {
        d[i] = g[i] > T(0) ? scale : (g[i] < T(0) ? -scale : T(0));
      }
      ol.push_back(std::move(d));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standard group convolution baseline

/// Grouped convolution with contiguous equal partitions; the bank has shape
/// (C', C / groups, k, k).
template <typename T>
Tensor<T> sgc_forward(const Tensor<T>& x, const ConvFilter<T>& bank, std::size_t groups,
                      std::size_t threads = 1) {
  const Shape& s = x.shape();
  const std::size_t oc = bank.out_channels();
  if (groups == 0 || s.c % groups != 0 || oc % groups != 0) {
    throw ShapeError("sgc: channels " + std::to_string(s.c) + "->" + std::to_string(oc) +
                     " not divisible by " + std::to_string(groups) + " groups");
  }
  const std::size_t cin = s.c / groups;
  const std::size_t cout = oc / groups;
  require(bank.in_channels() == cin, "sgc: bank in-channels " + std::to_string(bank.in_channels()) +
                                         " != " + std::to_string(cin));
  const std::size_t oh = conv_out_extent(s.h, bank.kernel(), bank.stride, bank.pad);
  const std::size_t ow = conv_out_extent(s.w, bank.kernel(), bank.stride, bank.pad);
  Tensor<T> out(s.n, oc, oh, ow);
  const ConvGeometry g{cin, s.h, s.w, bank.kernel(), bank.stride, bank.pad, oh, ow};
  const std::size_t group_weights = cout * g.rows();
  parallel_for(s.n, threads, [&](std::size_t n) {
    std::vector<T> col(g.rows() * g.cols());
    for (std::size_t gi = 0; gi < groups; ++gi) {
      im2col(x.sample(n).data() + gi * cin * s.plane(), g, col.data());
      detail::gemm_nn(bank.weights.data() + gi * group_weights, col.data(), out.sample(n).data() + gi * cout * oh * ow,
                      cout, g.rows(), g.cols(), false);
    }
  });
  return out;
}

template <typename T>
ConvGrads<T> sgc_backward(const Tensor<T>& x, const ConvFilter<T>& bank, std::size_t groups,
                          const Tensor<T>& grad_out, std::size_t threads = 1) {
  const Shape& s = x.shape();
  const std::size_t oc = bank.out_channels();
  if (groups == 0 || s.c % groups != 0 || oc % groups != 0) {
    throw ShapeError("sgc_backward: channels not divisible by groups");
  }
  const std::size_t cin = s.c / groups;
  const std::size_t cout = oc / groups;
  const std::size_t oh = conv_out_extent(s.h, bank.kernel(), bank.stride, bank.pad);
  const std::size_t ow = conv_out_extent(s.w, bank.kernel(), bank.stride, bank.pad);
  require(grad_out.shape() == Shape{s.n, oc, oh, ow}, "sgc_backward: grad_out shape mismatch");
  std::vector<ConvFilter<T>> parts;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    Tensor<T> w(cout, cin, bank.kernel(), bank.kernel());
    std::copy_n(bank.weights.data() + gi * w.size(), w.size(), w.data());
    parts.push_back({std::move(w), bank.stride, bank.pad});
  }
  const ConvGeometry g{cin, s.h, s.w, bank.kernel(), bank.stride, bank.pad, oh, ow};
  ConvGrads<T> grads{Tensor<T>(s), Tensor<T>(bank.weights.shape())};
  const std::size_t chunks = chunk_count(s.n);
  const std::size_t part_size = cout * cin * bank.kernel() * bank.kernel();
  std::vector<std::vector<T>> partial(chunks, std::vector<T>(bank.weights.size(), T(0)));
  parallel_for(chunks, threads, [&](std::size_t ch) {
    std::vector<T> col(g.rows() * g.cols());
    for (std::size_t n = ch * kReduceChunk; n < std::min(s.n, (ch + 1) * kReduceChunk); ++n) {
      for (std::size_t gi = 0; gi < groups; ++gi) {
        conv2d_backward_sample(x.sample(n).data() + gi * cin * s.plane(), parts[gi], g,
                               grad_out.sample(n).data() + gi * cout * oh * ow, col.data(),
                               grads.input.sample(n).data() + gi * cin * s.plane(),
                               partial[ch].data() + gi * part_size);
      }
    }
  });
  for (const auto& p : partial) {
    for (std::size_t i = 0; i < p.size(); ++i) grads.filter[i] += p[i];
  }
  return grads;
}

}  // namespace dgc
