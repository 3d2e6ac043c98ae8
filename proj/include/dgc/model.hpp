// SPDX-License-Identifier: Apache-2.0
//
// Small feed-forward networks built from a layer list: each layer is a plain,
// dynamic-group, or standard-group convolution followed by BN and ReLU; the
// stack ends in global average pooling and a linear classifier.
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dgc/dgc_layer.hpp"
#include "dgc/mac.hpp"
#include "dgc/ops.hpp"
#include "dgc/optim.hpp"
#include "dgc/tensor.hpp"

namespace dgc {

enum class LayerKind { Conv, Dgc, Sgc };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t groups = 1;  // SGC only

  bool operator==(const LayerSpec&) const = default;
};

inline std::string kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Dgc: return "dgc";
    case LayerKind::Sgc: return "sgc";
  }
  return "?";
}

/// Parses "conv:16:3:2,dgc:32:3:1,sgc:64:3:1:4" (kind:out:kernel:stride[:groups]).
inline std::vector<LayerSpec> parse_topology(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    std::vector<std::string> f;
    std::stringstream parts(item);
    std::string p;
    while (std::getline(parts, p, ':')) f.push_back(p);
    auto bad = [&](const std::string& why) {
      return std::invalid_argument("layer '" + item + "': " + why);
    };
    if (f.size() < 4 || f.size() > 5) throw bad("expected kind:out:kernel:stride[:groups]");
    LayerSpec s;
    if (f[0] == "conv") s.kind = LayerKind::Conv;
    else if (f[0] == "dgc") s.kind = LayerKind::Dgc;
    else if (f[0] == "sgc") s.kind = LayerKind::Sgc;
    else throw bad("unknown kind '" + f[0] + "'");
    try {
      s.out_channels = std::stoul(f[1]);
      s.kernel = std::stoul(f[2]);
      s.stride = std::stoul(f[3]);
      if (f.size() == 5) s.groups = std::stoul(f[4]);
    } catch (const std::logic_error&) {
      throw bad("non-numeric field");
    }
    if (f.size() == 5 && s.kind != LayerKind::Sgc) throw bad("groups only apply to sgc layers");
    if (s.kind == LayerKind::Sgc && f.size() != 5) throw bad("sgc layers need a group count");
    if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0 || s.groups == 0) {
      throw bad("fields must be positive");
    }
    if (s.kernel % 2 == 0) throw bad("kernel must be odd");
    layers.push_back(s);
  }
  if (layers.empty()) throw std::invalid_argument("model topology is empty");
  return layers;
}

inline std::string format_topology(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (const auto& s : layers) {
    if (!out.empty()) out += ',';
    out += kind_name(s.kind) + ":" + std::to_string(s.out_channels) + ":" + std::to_string(s.kernel) +
           ":" + std::to_string(s.stride);
    if (s.kind == LayerKind::Sgc) out += ":" + std::to_string(s.groups);
  }
  return out;
}

struct ModelConfig {
  std::vector<LayerSpec> layers;
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t classes = 10;
  std::size_t heads = 4;
  std::size_t squeeze = 8;
  double bias_init = 0.1;
};

template <typename T>
struct Block {
  LayerSpec spec;
  std::size_t in_channels = 0;
  std::size_t in_extent = 0;  // square input side
  ConvFilter<T> conv;         // conv and sgc
  DgcLayerState<T> dgc;
  BatchNormState<T> bn;

  Tensor<T> conv_grad;
  std::vector<HeadGrads<T>> dgc_grad;
  std::vector<T> bn_scale_grad, bn_shift_grad;

  Tensor<T> input;
  DgcCache<T> dgc_cache;
  BatchNormCache<T> bn_cache;
  Tensor<T> pre_relu;

  std::size_t out_extent() const { return conv_out_extent(in_extent, spec.kernel, spec.stride, spec.kernel / 2); }

  ConvShape mac_shape() const {
    return {spec.kernel, in_channels, spec.out_channels, out_extent(), out_extent()};
  }
};

/// Per-layer view of one forward pass over the DGC layers.
template <typename T>
struct ForwardPass {
  Tensor<T> logits;
  SaliencySet<T> saliency;                                          // [dgc layer][head] (N, C, 1, 1)
  std::vector<std::vector<std::vector<GateDecision<T>>>> decisions;  // [dgc layer][sample][head]
};

template <typename T>
class Network {
 public:
  ModelConfig config;
  std::vector<Block<T>> blocks;
  Linear<T> fc;
  std::vector<T> fc_weight_grad, fc_bias_grad;

  Network() = default;

  Network(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    std::mt19937_64 rng(seed);
    auto fill_normal = [&rng](std::span<T> dst, double fan_in) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (T& v : dst) v = static_cast<T>(dist(rng));
    };
    std::size_t channels = cfg.in_channels;
    std::size_t extent = cfg.image_size;
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
      const LayerSpec& s = cfg.layers[i];
      const std::string where = "layer " + std::to_string(i) + " (" + format_topology({s}) + ")";
      Block<T> b;
      b.spec = s;
      b.in_channels = channels;
      b.in_extent = extent;
      if (extent + 2 * (s.kernel / 2) < s.kernel) throw ShapeError(where + ": input smaller than kernel");
      switch (s.kind) {
        case LayerKind::Conv:
          b.conv = {Tensor<T>(s.out_channels, channels, s.kernel, s.kernel), s.stride, s.kernel / 2};
          fill_normal(b.conv.weights.span(), static_cast<double>(channels * s.kernel * s.kernel));
          break;
        case LayerKind::Sgc:
          if (channels % s.groups != 0 || s.out_channels % s.groups != 0) {
            throw ShapeError(where + ": channels not divisible by " + std::to_string(s.groups) + " groups");
          }
          b.conv = {Tensor<T>(s.out_channels, channels / s.groups, s.kernel, s.kernel), s.stride,
                    s.kernel / 2};
          fill_normal(b.conv.weights.span(), static_cast<double>(channels / s.groups * s.kernel * s.kernel));
          break;
        case LayerKind::Dgc: {
          DgcLayerConfig dc;
          dc.in_channels = channels;
          dc.out_channels = s.out_channels;
          dc.kernel = s.kernel;
          dc.stride = s.stride;
          dc.pad = s.kernel / 2;
          dc.heads = cfg.heads;
          dc.squeeze = cfg.squeeze;
          try {
            dc.validate();
          } catch (const ShapeError& e) {
            throw ShapeError(where + ": " + e.what());
          }
          b.dgc = init_dgc_layer<T>(dc, rng, static_cast<T>(cfg.bias_init));
          break;
        }
      }
      b.bn = BatchNormState<T>(s.out_channels);
      channels = s.out_channels;
      extent = b.out_extent();
      blocks.push_back(std::move(b));
    }
    fc = Linear<T>(channels, cfg.classes);
    fill_normal(fc.weight, static_cast<double>(channels) * 2.0);
    zero_grad();
  }

  std::size_t dgc_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.spec.kind == LayerKind::Dgc ? 1 : 0;
    return n;
  }

  std::vector<std::size_t> heads_per_dgc_layer() const {
    std::vector<std::size_t> h;
    for (const auto& b : blocks) {
      if (b.spec.kind == LayerKind::Dgc) h.push_back(b.dgc.config.heads);
    }
    return h;
  }

  /// Saliency entries per sample across all DGC heads.
  std::size_t saliency_row_length() const {
    std::size_t n = 0;
    for (const auto& b : blocks) {
      if (b.spec.kind == LayerKind::Dgc) n += b.dgc.config.heads * b.in_channels;
    }
    return n;
  }

  void set_training(bool training) {
    for (auto& b : blocks) b.bn.training = training;
  }

  void zero_grad() {
    for (auto& b : blocks) {
      if (b.spec.kind == LayerKind::Dgc) {
        b.dgc_grad.clear();
        for (const auto& h : b.dgc.heads) b.dgc_grad.emplace_back(h);
      } else {
        b.conv_grad = Tensor<T>(b.conv.weights.shape());
      }
      b.bn_scale_grad.assign(b.bn.channels(), T(0));
      b.bn_shift_grad.assign(b.bn.channels(), T(0));
    }
    fc_weight_grad.assign(fc.weight.size(), T(0));
    fc_bias_grad.assign(fc.bias.size(), T(0));
  }

  ForwardPass<T> forward(const Tensor<T>& x, const GateSpec& gate, std::size_t threads = 1) {
    require(x.shape().c == config.in_channels && x.shape().h == config.image_size &&
                x.shape().w == config.image_size,
            "network expects (N, " + std::to_string(config.in_channels) + ", " +
                std::to_string(config.image_size) + ", " + std::to_string(config.image_size) + "), got " +
                x.shape().str());
    ForwardPass<T> pass;
    Tensor<T> h = x;
    for (auto& b : blocks) {
      Tensor<T> pre;
      switch (b.spec.kind) {
        case LayerKind::Conv:
          pre = conv2d_forward(h, b.conv, threads);
          break;
        case LayerKind::Sgc:
          pre = sgc_forward(h, b.conv, b.spec.groups, threads);
          break;
        case LayerKind::Dgc: {
          auto out = dgc_forward(h, b.dgc, gate, &b.dgc_cache, threads);
          pre = std::move(out.output);
          pass.saliency.push_back(std::move(out.saliency));
          pass.decisions.push_back(std::move(out.decisions));
          break;
        }
      }
      b.input = std::move(h);
      b.pre_relu = batchnorm_forward(pre, b.bn, &b.bn_cache);
      h = relu_forward(b.pre_relu);
    }
    pooled_shape_ = h.shape();
    pooled_ = global_avg_pool(h);
    pass.logits = linear_forward(pooled_, fc);
    return pass;
  }

  /// Backpropagates dL/dlogits and optional per-DGC-layer saliency gradients.
  /// Gradients are written (not accumulated) to the grad buffers.
  void backward(const Tensor<T>& grad_logits, const SaliencySet<T>& saliency_grad, std::size_t threads = 1) {
    const auto lg = linear_backward(pooled_, fc, grad_logits);
    fc_weight_grad = lg.weight;
    fc_bias_grad = lg.bias;
    Tensor<T> g = global_avg_pool_backward(pooled_shape_, lg.input);
    std::size_t dgc_index = dgc_count();
    for (std::size_t i = blocks.size(); i-- > 0;) {
      auto& b = blocks[i];
      g = relu_backward(b.pre_relu, g);
      auto bg = batchnorm_backward(b.bn_cache, b.bn, g);
      b.bn_scale_grad = std::move(bg.scale);
      b.bn_shift_grad = std::move(bg.shift);
      switch (b.spec.kind) {
        case LayerKind::Conv: {
          auto cg = conv2d_backward(b.input, b.conv, bg.input, threads);
          b.conv_grad = std::move(cg.filter);
          g = std::move(cg.input);
          break;
        }
        case LayerKind::Sgc: {
          auto cg = sgc_backward(b.input, b.conv, b.spec.groups, bg.input, threads);
          b.conv_grad = std::move(cg.filter);
          g = std::move(cg.input);
          break;
        }
        case LayerKind::Dgc: {
          --dgc_index;
          const std::vector<Tensor<T>> none;
          const auto& sg = dgc_index < saliency_grad.size() ? saliency_grad[dgc_index] : none;
          auto dg = dgc_backward(b.dgc_cache, b.dgc, bg.input, sg, threads);
          b.dgc_grad = std::move(dg.heads);
          g = std::move(dg.input);
          break;
        }
      }
    }
  }

  /// Parameters in a fixed order with their gradients. Saliency generator
  /// parameters are exempt from weight decay. Spans stay valid until the
  /// next backward() or zero_grad().
  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      if (b.spec.kind == LayerKind::Dgc) {
        for (std::size_t h = 0; h < b.dgc.heads.size(); ++h) {
          auto& hp = b.dgc.heads[h];
          auto& hg = b.dgc_grad[h];
          const std::string q = p + "head" + std::to_string(h) + ".";
          out.push_back({q + "filters", hp.filters.span(), hg.filters.span(), true, dims_of(hp.filters)});
          out.push_back({q + "squeeze.weight", hp.squeeze.weight, hg.squeeze_weight, false,
                         {hp.squeeze.out, hp.squeeze.in}});
          out.push_back({q + "squeeze.bias", hp.squeeze.bias, hg.squeeze_bias, false, {}});
          out.push_back({q + "expand.weight", hp.expand.weight, hg.expand_weight, false,
                         {hp.expand.out, hp.expand.in}});
          out.push_back({q + "expand.bias", hp.expand.bias, hg.expand_bias, false, {}});
        }
      } else {
        out.push_back({p + "weight", b.conv.weights.span(), b.conv_grad.span(), true, dims_of(b.conv.weights)});
      }
      out.push_back({p + "bn.scale", b.bn.scale, b.bn_scale_grad, true, {}});
      out.push_back({p + "bn.shift", b.bn.shift, b.bn_shift_grad, true, {}});
    }
    out.push_back({"fc.weight", fc.weight, fc_weight_grad, true, {fc.out, fc.in}});
    out.push_back({"fc.bias", fc.bias, fc_bias_grad, true, {}});
    return out;
  }

  /// Non-trainable buffers that still belong to the model state.
  std::vector<std::pair<std::string, std::span<T>>> buffers() {
    std::vector<std::pair<std::string, std::span<T>>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      out.emplace_back(p + "bn.running_mean", std::span<T>(blocks[i].bn.running_mean));
      out.emplace_back(p + "bn.running_var", std::span<T>(blocks[i].bn.running_var));
    }
    return out;
  }

  bool stats_ready() const {
    for (const auto& b : blocks) {
      if (!b.bn.stats_ready) return false;
    }
    return true;
  }

  void mark_stats_ready(bool ready) {
    for (auto& b : blocks) b.bn.stats_ready = ready;
  }

 private:
  static std::vector<std::size_t> dims_of(const Tensor<T>& t) {
    const Shape& s = t.shape();
    return {s.n, s.c, s.h, s.w};
  }

  Tensor<T> pooled_;
  Shape pooled_shape_;
};

/// Fraction of input channels deactivated, averaged over samples and heads.
template <typename T>
double realized_prune_rate(const std::vector<std::vector<GateDecision<T>>>& decisions, std::size_t channels) {
  std::size_t kept = 0;
  std::size_t total = 0;
  for (const auto& row : decisions) {
    for (const auto& d : row) {
      kept += d.indices.size();
      total += channels;
    }
  }
  return total == 0 ? 0.0 : 1.0 - static_cast<double>(kept) / static_cast<double>(total);
}

}  // namespace dgc
