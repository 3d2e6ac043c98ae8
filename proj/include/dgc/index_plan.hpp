// SPDX-License-Identifier: Apache-2.0
//
// Inference-time dynamic index layer: per sample and head, the selected
// input channels and the matching filter slices are gathered into dense
// buffers so each head runs an ordinary convolution on a smaller slice.
#pragma once

#include <chrono>
#include <cstddef>
#include <string>
#include <vector>

#include "dgc/dgc_layer.hpp"
#include "dgc/ops.hpp"

namespace dgc {

template <typename T>
struct HeadPlan {
  std::vector<std::size_t> indices;  // sorted selected input channels
  std::vector<T> amplification;
  Tensor<T> filters;                 // (C'/H, |indices|, k, k)
};

template <typename T>
struct IndexPlan {
  DgcLayerConfig config;
  Shape input_shape;
  std::vector<std::vector<HeadPlan<T>>> heads;  // [sample][head]
  std::chrono::steady_clock::time_point created;
};

/// Gathered, amplified inputs per [sample][head], shape (1, |indices|, H, W).
template <typename T>
using GatheredInputs = std::vector<std::vector<Tensor<T>>>;

template <typename T>
IndexPlan<T> build_index_plan(const DgcLayerState<T>& layer, const Shape& input_shape,
                              const std::vector<std::vector<GateDecision<T>>>& decisions) {
  const auto& cfg = layer.config;
  if (input_shape.c != cfg.in_channels) {
    throw ShapeError("index plan: layer expects " + std::to_string(cfg.in_channels) + " channels, input is " +
                     input_shape.str());
  }
  if (decisions.size() != input_shape.n) {
    throw StateError("stale gating decisions: " + std::to_string(decisions.size()) + " rows for a batch of " +
                     std::to_string(input_shape.n));
  }
  IndexPlan<T> plan;
  plan.config = cfg;
  plan.input_shape = input_shape;
  plan.heads.resize(decisions.size());
  for (std::size_t n = 0; n < decisions.size(); ++n) {
    if (decisions[n].size() != cfg.heads) {
      throw StateError("stale gating decisions: sample " + std::to_string(n) + " has " +
                       std::to_string(decisions[n].size()) + " heads, layer has " + std::to_string(cfg.heads));
    }
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto& d = decisions[n][h];
      if (d.indices.size() != d.amplification.size()) {
        throw StateError("stale gating decisions: index and amplification counts differ");
      }
      for (std::size_t j = 0; j < d.indices.size(); ++j) {
        if (d.indices[j] >= cfg.in_channels || (j > 0 && d.indices[j] <= d.indices[j - 1])) {
          throw StateError("stale gating decisions: sample " + std::to_string(n) + " head " + std::to_string(h) +
                           " lists channel " + std::to_string(d.indices[j]) + " for a layer of " +
                           std::to_string(cfg.in_channels) + " sorted channels");
        }
      }
      plan.heads[n].push_back({d.indices, d.amplification, gather_filters(layer.heads[h].filters, d.indices)});
    }
  }
  plan.created = std::chrono::steady_clock::now();
  return plan;
}

namespace detail {

template <typename T>
void check_plan_input(const IndexPlan<T>& plan, const Tensor<T>& x) {
  if (x.shape() != plan.input_shape) {
    throw StateError("stale index plan: built for input " + plan.input_shape.str() + ", given " + x.shape().str());
  }
}

}  // namespace detail

template <typename T>
GatheredInputs<T> gather_inputs(const IndexPlan<T>& plan, const Tensor<T>& x) {
  detail::check_plan_input(plan, x);
  GatheredInputs<T> out(plan.heads.size());
  for (std::size_t n = 0; n < plan.heads.size(); ++n) {
    for (const auto& hp : plan.heads[n]) {
      out[n].push_back(select_and_amplify(x, n, GateDecision<T>{hp.indices, hp.amplification, T(0)}));
    }
  }
  return out;
}

/// Runs each head's dense convolution on its gathered slice and writes the
/// results in shuffled channel order.
template <typename T>
Tensor<T> convolve_gathered(const IndexPlan<T>& plan, const GatheredInputs<T>& inputs) {
  const auto& cfg = plan.config;
  const Shape os = dgc_output_shape(plan.input_shape, cfg);
  require(inputs.size() == os.n, "convolve_gathered: gathered inputs do not match the plan");
  Tensor<T> out(os);
  const std::size_t per = cfg.outputs_per_head();
  const std::size_t plane = os.plane();
  std::vector<T> head_out(per * plane);
  std::vector<T> col;
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto& hp = plan.heads[n][h];
      const Tensor<T>& y = inputs[n][h];
      if (hp.indices.empty()) {
        std::fill(head_out.begin(), head_out.end(), T(0));
      } else {
        const ConvFilter<T> w{hp.filters, cfg.stride, cfg.pad};
        const ConvGeometry g = conv_geometry(y.shape(), w);
        col.resize(g.rows() * g.cols());
        conv2d_sample(y.data(), w, g, col.data(), head_out.data());
      }
      for (std::size_t s = 0; s < per; ++s) {
        std::copy_n(head_out.data() + s * plane, plane, out.channel(n, shuffled_position(h, s, cfg.heads)).begin());
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> execute_index_plan(const IndexPlan<T>& plan, const Tensor<T>& x) {
  return convolve_gathered(plan, gather_inputs(plan, x));
}

}  // namespace dgc
