// SPDX-License-Identifier: Apache-2.0
//
// Network-wide gating: one threshold on |g| shared by every head of every DGC
// layer, calibrated from a rolling library of signed saliencies, plus the
// angle-enlargement penalty that pushes head saliencies apart.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "dgc/dgc_layer.hpp"
#include "dgc/tensor.hpp"

namespace dgc {

/// FIFO of complete network-wide saliency rows, one per sample, laid out
/// layer-major then head-major.
template <typename T>
class SaliencyLibrary {
 public:
  SaliencyLibrary() = default;
  SaliencyLibrary(std::size_t capacity, std::size_t row_length)
      : capacity_(capacity), row_length_(row_length) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t row_length() const { return row_length_; }
  std::size_t rows() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const std::deque<std::vector<T>>& data() const { return rows_; }
  void clear() { rows_.clear(); }

  void append(std::vector<T> row) {
    if (row.size() != row_length_) {
      throw ShapeError("saliency row has " + std::to_string(row.size()) + " entries, library expects " +
                       std::to_string(row_length_));
    }
    if (capacity_ == 0) return;
    if (rows_.size() == capacity_) rows_.pop_front();
    rows_.push_back(std::move(row));
  }

  /// Appends one row per sample from a pass's saliencies ([layer][head] ->
  /// (N, C_l, 1, 1)).
  void collect(const SaliencySet<T>& set, const std::vector<std::size_t>& heads_per_layer) {
    if (set.size() != heads_per_layer.size()) {
      throw ShapeError("saliency set covers " + std::to_string(set.size()) + " layers, expected " +
                       std::to_string(heads_per_layer.size()));
    }
    std::size_t batch = 0;
    for (std::size_t l = 0; l < set.size(); ++l) {
      if (set[l].size() != heads_per_layer[l]) {
        throw ShapeError("layer " + std::to_string(l) + " is missing head saliencies (" +
                         std::to_string(set[l].size()) + " of " + std::to_string(heads_per_layer[l]) + ")");
      }
      for (const auto& g : set[l]) batch = g.shape().n;
    }
    for (std::size_t n = 0; n < batch; ++n) append(collect_row(set, n));
  }

  static std::vector<T> collect_row(const SaliencySet<T>& set, std::size_t n) {
    std::vector<T> row;
    for (const auto& layer : set) {
      for (const auto& g : layer) {
        auto s = g.sample(n);
        row.insert(row.end(), s.begin(), s.end());
      }
    }
    return row;
  }

  void restore(std::deque<std::vector<T>> rows) {
    for (const auto& r : rows) {
      if (r.size() != row_length_) throw ShapeError("restored saliency row has wrong length");
    }
    if (rows.size() > capacity_) throw ShapeError("restored library exceeds its capacity");
    rows_ = std::move(rows);
  }

 private:
  std::size_t capacity_ = 0;
  std::size_t row_length_ = 0;
  std::deque<std::vector<T>> rows_;
};

/// Rank index of the threshold: floor(rate * count), with a relative slack
/// so products such as 0.7 * 10 are not pushed below their integer value.
inline std::size_t threshold_rank(std::size_t count, double prune_rate) {
  const double raw = prune_rate * static_cast<double>(count);
  const auto r = static_cast<std::size_t>(std::floor(raw + 1e-9 * std::max(1.0, raw)));
  return std::min(r, count - 1);
}

/// The (floor(rate * M) + 1)-th smallest |g| over all M library entries, so
/// the fraction strictly below it is the largest value not exceeding rate.
template <typename T>
T compute_global_threshold(std::span<const T> values, double prune_rate) {
  if (values.empty()) throw StateError("global threshold requested from an empty saliency library");
  std::vector<T> mags(values.size());
  std::transform(values.begin(), values.end(), mags.begin(), [](T v) { return std::abs(v); });
  const std::size_t rank = threshold_rank(mags.size(), prune_rate);
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(rank), mags.end());
  return mags[rank];
}

template <typename T>
T compute_global_threshold(const SaliencyLibrary<T>& library, double prune_rate) {
  if (library.empty()) throw StateError("global threshold requested from an empty saliency library");
  std::vector<T> all;
  all.reserve(library.rows() * library.row_length());
  for (const auto& r : library.data()) all.insert(all.end(), r.begin(), r.end());
  return compute_global_threshold<T>(std::span<const T>(all), prune_rate);
}

struct GlobalThresholdState {
  double threshold = 0.0;
  std::size_t updates = 0;
  std::size_t period = 3;        // epochs between updates
  std::size_t iterations = 5;    // N: collection window at the end of an update epoch
  std::size_t batch = 256;       // B

  std::size_t library_capacity() const { return iterations * batch; }

  bool is_update_epoch(std::size_t epoch) const { return (epoch + 1) % period == 0; }

  /// True when iteration `it` of `per_epoch` falls in the collection window.
  bool collects(std::size_t epoch, std::size_t it, std::size_t per_epoch) const {
    return is_update_epoch(epoch) && it + iterations >= per_epoch;
  }
};

enum class ThresholdUpdate { NotDue, Updated, EmptyLibrary };

/// Called once per epoch end. On every third epoch the threshold is
/// recomputed from the library; an empty library keeps the old value.
template <typename T>
ThresholdUpdate maybe_update_threshold(GlobalThresholdState& state, std::size_t epoch,
                                       const SaliencyLibrary<T>& library, double prune_rate) {
  if (!state.is_update_epoch(epoch)) return ThresholdUpdate::NotDue;
  if (library.empty()) return ThresholdUpdate::EmptyLibrary;
  state.threshold = static_cast<double>(compute_global_threshold(library, prune_rate));
  ++state.updates;
  return ThresholdUpdate::Updated;
}

// ---------------------------------------------------------------------------
// Angle enlargement

namespace detail {

template <typename T>
T norm2(std::span<const T> v) {
  T s = 0;
  for (T x : v) s += x * x;
  return std::sqrt(s);
}

inline std::size_t head_pairs(const auto& set) {
  std::size_t pairs = 0;
  for (const auto& layer : set) pairs += layer.size() * (layer.size() - (layer.empty() ? 0 : 1)) / 2;
  return pairs;
}

}  // namespace detail

/// Mean over samples, layers and head pairs of |cos(g_i, g_j)|. Pairs with a
/// zero-norm vector contribute 0.
template <typename T>
T mean_pairwise_abs_cos(const SaliencySet<T>& set) {
  const std::size_t pairs = detail::head_pairs(set);
  if (pairs == 0) return T(0);
  T total = 0;
  std::size_t batch = 0;
  for (const auto& layer : set) {
    for (std::size_t i = 0; i < layer.size(); ++i) {
      batch = layer[i].shape().n;
      for (std::size_t j = i + 1; j < layer.size(); ++j) {
        for (std::size_t n = 0; n < batch; ++n) {
          auto a = layer[i].sample(n);
          auto b = layer[j].sample(n);
          const T na = detail::norm2(a);
          const T nb = detail::norm2(b);
          if (na == T(0) || nb == T(0)) continue;
          T d = 0;
          for (std::size_t c = 0; c < a.size(); ++c) d += a[c] * b[c];
          total += std::abs(d / (na * nb));
        }
      }
    }
  }
  if (batch == 0) return T(0);
  return total / static_cast<T>(pairs * batch);
}

/// lambda * 2 / (L H (H - 1)) * sum of |cos| over head pairs, batch-averaged.
template <typename T>
T angle_loss(const SaliencySet<T>& set, double lambda) {
  return static_cast<T>(lambda) * mean_pairwise_abs_cos(set);
}

template <typename T>
SaliencySet<T> angle_grad(const SaliencySet<T>& set, double lambda) {
  SaliencySet<T> out;
  for (const auto& layer : set) {
    auto& ol = out.emplace_back();
    for (const auto& g : layer) ol.emplace_back(g.shape());
  }
  const std::size_t pairs = detail::head_pairs(set);
  if (pairs == 0) return out;
  for (std::size_t l = 0; l < set.size(); ++l) {
    const auto& layer = set[l];
    for (std::size_t i = 0; i < layer.size(); ++i) {
      for (std::size_t j = i + 1; j < layer.size(); ++j) {
        const std::size_t batch = layer[i].shape().n;
        const T scale = static_cast<T>(lambda) / static_cast<T>(pairs * batch);
        for (std::size_t n = 0; n < batch; ++n) {
          auto a = layer[i].sample(n);
          auto b = layer[j].sample(n);
          const T na = detail::norm2(a);
          const T nb = detail::norm2(b);
          if (na == T(0) || nb == T(0)) continue;
          T d = 0;
          for (std::size_t c = 0; c < a.size(); ++c) d += a[c] * b[c];
          const T cosv = d / (na * nb);
          const T sgn = cosv > T(0) ? T(1) : (cosv < T(0) ? T(-1) : T(0));
          auto da = out[l][i].sample(n);
          auto db = out[l][j].sample(n);
          for (std::size_t c = 0; c < a.size(); ++c) {
            da[c] += scale * sgn * (b[c] / nb - cosv * a[c] / na) / na;
            db[c] += scale * sgn * (a[c] / na - cosv * b[c] / nb) / nb;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace dgc
