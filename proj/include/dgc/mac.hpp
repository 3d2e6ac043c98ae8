// SPDX-License-Identifier: Apache-2.0
//
// Multiply-accumulate accounting. Only multiply-accumulates are counted: no
// bias adds, normalization, or activations.
#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>

#include "dgc/dgc_layer.hpp"

namespace dgc {

struct ConvShape {
  std::uint64_t kernel = 3;
  std::uint64_t in_channels = 0;
  std::uint64_t out_channels = 0;
  std::uint64_t out_h = 0;
  std::uint64_t out_w = 0;

  std::uint64_t out_plane() const { return out_h * out_w; }
};

struct MacReport {
  std::uint64_t dense = 0;
  std::uint64_t saliency = 0;
  std::uint64_t conv = 0;

  std::uint64_t total() const { return saliency + conv; }
  double saving() const { return total() == 0 ? 0.0 : static_cast<double>(dense) / static_cast<double>(total()); }
};

/// k^2 C' C H' W'.
inline std::uint64_t mac_dense(const ConvShape& s) {
  return s.kernel * s.kernel * s.out_channels * s.in_channels * s.out_plane();
}

/// Per head: 2 C^2 / d for the saliency generator and k^2 kept (C'/H) H' W'
/// for the convolution, where kept is the number of selected input channels.
inline MacReport mac_dgc_counts(const ConvShape& s, std::span<const std::size_t> kept_per_head,
                                std::uint64_t squeeze) {
  require(!kept_per_head.empty(), "mac_dgc: at least one head required");
  require(squeeze >= 1 && s.in_channels % squeeze == 0, "mac_dgc: squeeze rate must divide C");
  const std::uint64_t heads = kept_per_head.size();
  require(s.out_channels % heads == 0, "mac_dgc: head count must divide C'");
  MacReport r;
  r.dense = mac_dense(s);
  r.saliency = heads * 2 * s.in_channels * (s.in_channels / squeeze);
  const std::uint64_t per_head = s.out_channels / heads;
  for (std::size_t kept : kept_per_head) {
    r.conv += s.kernel * s.kernel * static_cast<std::uint64_t>(kept) * per_head * s.out_plane();
  }
  return r;
}

/// Head-wise gating: every head keeps ceil((1 - rate) C) channels.
inline MacReport mac_dgc(const ConvShape& s, double prune_rate, std::size_t heads, std::uint64_t squeeze) {
  const std::vector<std::size_t> kept(heads, keep_count(s.in_channels, prune_rate));
  return mac_dgc_counts(s, kept, squeeze);
}

}  // namespace dgc
