// SPDX-License-Identifier: Apache-2.0
//
// Dense layer primitives with hand-written backward passes. Convolution is
// im2col followed by a single-threaded Eigen GEMM so the accumulation order is
// fixed for a given shape.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dgc/parallel.hpp"
#include "dgc/tensor.hpp"

namespace dgc {

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// c (m x n) = a (m x k) * b (k x n), optionally accumulating into c.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  ConstMapMat<T> A(a, m, k);
  ConstMapMat<T> B(b, k, n);
  MapMat<T> C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

// c (m x n) += a (m x k) * b^T where b is (n x k).
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMapMat<T> A(a, m, k);
  ConstMapMat<T> B(b, n, k);
  MapMat<T> C(c, m, n);
  C.noalias() += A * B.transpose();
}

// c (m x n) = a^T * b where a is (k x m), b is (k x n).
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMapMat<T> A(a, k, m);
  ConstMapMat<T> B(b, k, n);
  MapMat<T> C(c, m, n);
  C.noalias() = A.transpose() * B;
}

}  // namespace detail

/// Filter bank of shape (out, in, k, k) applied as cross-correlation.
template <typename T>
struct ConvFilter {
  Tensor<T> weights;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_channels() const { return weights.shape().n; }
  std::size_t in_channels() const { return weights.shape().c; }
  std::size_t kernel() const { return weights.shape().h; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (k == 0 || stride == 0 || in + 2 * pad < k) {
    throw ShapeError("convolution with kernel " + std::to_string(k) + ", stride " +
                     std::to_string(stride) + ", pad " + std::to_string(pad) +
                     " yields no output for input extent " + std::to_string(in));
  }
  return (in + 2 * pad - k) / stride + 1;
}

struct ConvGeometry {
  std::size_t channels, h, w, k, stride, pad, out_h, out_w;

  std::size_t rows() const { return channels * k * k; }
  std::size_t cols() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Shape& in, const ConvFilter<T>& f) {
  const auto& ws = f.weights.shape();
  if (ws.h != ws.w || ws.h == 0) {
    throw ShapeError("filter must be square with k >= 1, got " + ws.str());
  }
  if (in.c != ws.c) {
    throw ShapeError("input has " + std::to_string(in.c) + " channels but filter expects " +
                     std::to_string(ws.c) + " (input " + in.str() + ", filter " + ws.str() + ")");
  }
  return {in.c,
          in.h,
          in.w,
          ws.h,
          f.stride,
          f.pad,
          conv_out_extent(in.h, ws.h, f.stride, f.pad),
          conv_out_extent(in.w, ws.w, f.stride, f.pad)};
}

namespace detail {

/// Output columns [lo, hi) whose kernel tap kj reads inside the input row.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  std::size_t lo = 0;
  while (lo < g.out_w && lo * g.stride + kj < g.pad) ++lo;
  std::size_t hi = g.out_w;
  while (hi > lo && (hi - 1) * g.stride + kj >= g.pad + g.w) --hi;
  return {lo, hi};
}

}  // namespace detail

/// Unfolds one sample (channels x h x w) into a (channels*k*k) x (out_h*out_w) matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t k = g.k;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          const auto [lo, hi] = detail::valid_columns(g, kj);
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + g.out_w, T(0));
          const T* first = src + (lo * g.stride + kj - g.pad);
          if (g.stride == 1) {
            std::copy(first, first + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = first[(ox - lo) * g.stride];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds a column matrix back into a sample.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t k = g.k;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  std::fill(x, x + g.channels * g.h * g.w, T(0));
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* src = row + oy * g.out_w;
          const auto [lo, hi] = detail::valid_columns(g, kj);
          T* first = dst + (lo * g.stride + kj - g.pad);
          for (std::size_t ox = lo; ox < hi; ++ox) first[(ox - lo) * g.stride] += src[ox];
        }
      }
    }
  }
}

/// Convolves a single sample; `out` receives out_channels x out_h x out_w.
/// `col` is scratch space of g.rows() * g.cols() elements.
template <typename T>
void conv2d_sample(const T* x, const ConvFilter<T>& f, const ConvGeometry& g, T* col, T* out) {
  im2col(x, g, col);
  detail::gemm_nn(f.weights.data(), col, out, f.out_channels(), g.rows(), g.cols(), false);
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvFilter<T>& filter,
                         std::size_t threads = 1) {
  const ConvGeometry g = conv_geometry(input.shape(), filter);
  const std::size_t batch = input.shape().n;
  Tensor<T> out(batch, filter.out_channels(), g.out_h, g.out_w);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batch));
  std::vector<std::vector<T>> scratch(workers, std::vector<T>(g.rows() * g.cols()));
  const std::size_t per = batch == 0 ? 0 : (batch + workers - 1) / workers;
  parallel_for(workers, workers, [&](std::size_t t) {
    for (std::size_t n = t * per; n < std::min(batch, (t + 1) * per); ++n) {
      conv2d_sample(input.sample(n).data(), filter, g, scratch[t].data(), out.sample(n).data());
    }
  });
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> filter;
};

/// Backward of one sample: accumulates into grad_w, writes grad_x.
template <typename T>
void conv2d_backward_sample(const T* x, const ConvFilter<T>& f, const ConvGeometry& g,
                            const T* grad_out, T* col, T* grad_x, T* grad_w) {
  const std::size_t oc = f.out_channels();
  im2col(x, g, col);
  detail::gemm_nt_acc(grad_out, col, grad_w, oc, g.cols(), g.rows());
  if (grad_x != nullptr) {
    detail::gemm_tn(f.weights.data(), grad_out, col, g.rows(), oc, g.cols());
    col2im(col, g, grad_x);
  }
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvFilter<T>& filter,
                             const Tensor<T>& grad_out, std::size_t threads = 1) {
  const ConvGeometry g = conv_geometry(input.shape(), filter);
  const std::size_t batch = input.shape().n;
  const Shape expect{batch, filter.out_channels(), g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw ShapeError("conv2d_backward: grad_out shape " + grad_out.shape().str() +
                     " does not match forward output " + expect.str());
  }
  ConvGrads<T> grads{Tensor<T>(input.shape()), Tensor<T>(filter.weights.shape())};
  const std::size_t chunks = chunk_count(batch);
  std::vector<std::vector<T>> partial(chunks, std::vector<T>(filter.weights.size(), T(0)));
  parallel_for(chunks, threads, [&](std::size_t ch) {
    std::vector<T> col(g.rows() * g.cols());
    for (std::size_t n = ch * kReduceChunk; n < std::min(batch, (ch + 1) * kReduceChunk); ++n) {
      conv2d_backward_sample(input.sample(n).data(), filter, g, grad_out.sample(n).data(),
                             col.data(), grads.input.sample(n).data(), partial[ch].data());
    }
  });
  T* gw = grads.filter.data();
  for (const auto& p : partial) {
    for (std::size_t i = 0; i < p.size(); ++i) gw[i] += p[i];
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormState {
  std::vector<T> scale;
  std::vector<T> shift;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  bool training = true;
  bool stats_ready = false;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : scale(channels, T(1)),
        shift(channels, T(0)),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  std::size_t channels() const { return scale.size(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;
  std::vector<T> inv_std;
  bool training = true;
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, BatchNormState<T>& state,
                            BatchNormCache<T>* cache = nullptr) {
  const Shape& s = input.shape();
  if (s.c != state.channels()) {
    throw ShapeError("batchnorm expects " + std::to_string(state.channels()) +
                     " channels, input is " + s.str());
  }
  if (!state.training && !state.stats_ready) {
    throw StateError("batchnorm evaluation requested before running statistics were set");
  }
  const std::size_t plane = s.plane();
  const std::size_t count = s.n * plane;
  Tensor<T> out(s);
  Tensor<T> normalized(s);
  std::vector<T> inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    T mean;
    T var;
    if (state.training) {
      if (count == 0) throw ShapeError("batchnorm training on an empty batch");
      T sum = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (T v : input.channel(n, c)) sum += v;
      }
      mean = sum / static_cast<T>(count);
      T sq = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (T v : input.channel(n, c)) sq += (v - mean) * (v - mean);
      }
      var = sq / static_cast<T>(count);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      if (state.stats_ready) {
        state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean;
        state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
      } else {
        state.running_mean[c] = mean;
        state.running_var[c] = unbiased;
      }
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T istd = T(1) / std::sqrt(var + state.eps);
    inv_std[c] = istd;
    for (std::size_t n = 0; n < s.n; ++n) {
      auto src = input.channel(n, c);
      auto nrm = normalized.channel(n, c);
      auto dst = out.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        nrm[i] = (src[i] - mean) * istd;
        dst[i] = state.scale[c] * nrm[i] + state.shift[c];
      }
    }
  }
  if (state.training) state.stats_ready = true;
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->training = state.training;
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> scale;
  std::vector<T> shift;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BatchNormState<T>& state,
                                     const Tensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  if (s != cache.normalized.shape()) {
    throw ShapeError("batchnorm_backward: grad_out " + s.str() + " vs cached " +
                     cache.normalized.shape().str());
  }
  const std::size_t plane = s.plane();
  const T m = static_cast<T>(s.n * plane);
  BatchNormGrads<T> g{Tensor<T>(s), std::vector<T>(s.c, T(0)), std::vector<T>(s.c, T(0))};
  for (std::size_t c = 0; c < s.c; ++c) {
    T sum_dy = 0;
    T sum_dy_xhat = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      auto dy = grad_out.channel(n, c);
      auto xh = cache.normalized.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    g.shift[c] = sum_dy;
    g.scale[c] = sum_dy_xhat;
    const T gamma = state.scale[c];
    const T istd = cache.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      auto dy = grad_out.channel(n, c);
      auto xh = cache.normalized.channel(n, c);
      auto dx = g.input.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        if (cache.training) {
          dx[i] = gamma * istd * (dy[i] - sum_dy / m - xh[i] * sum_dy_xhat / m);
        } else {
          dx[i] = gamma * istd * dy[i];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling, activation, affine

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h == 0 || s.w == 0) {
    throw ShapeError("global_avg_pool on empty spatial extent " + s.str());
  }
  Tensor<T> out(s.n, s.c, 1, 1);
  const T denom = static_cast<T>(s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T sum = 0;
      for (T v : input.channel(n, c)) sum += v;
      out.at(n, c, 0, 0) = sum / denom;
    }
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  require(grad_out.shape() == Shape{input_shape.n, input_shape.c, 1, 1},
          "global_avg_pool_backward: grad shape " + grad_out.shape().str());
  Tensor<T> g(input_shape);
  const T denom = static_cast<T>(input_shape.plane());
  for (std::size_t n = 0; n < input_shape.n; ++n) {
    for (std::size_t c = 0; c < input_shape.c; ++c) {
      const T v = grad_out.at(n, c, 0, 0) / denom;
      for (T& d : g.channel(n, c)) d = v;
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

/// Subgradient at exactly zero is taken as zero.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  require(input.shape() == grad_out.shape(), "relu_backward: shape mismatch " +
                                                 input.shape().str() + " vs " +
                                                 grad_out.shape().str());
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

/// Affine map y = W x + b with W stored row-major as (out x in).
template <typename T>
struct Linear {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features)
      : in(in_features), out(out_features), weight(in_features * out_features, T(0)),
        bias(out_features, T(0)) {}
};

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& input, const Linear<T>& layer) {
  const Shape& s = input.shape();
  if (s.sample() != layer.in) {
    throw ShapeError("linear expects " + std::to_string(layer.in) + " features per sample, input is " +
                     s.str());
  }
  Tensor<T> out(s.n, layer.out, 1, 1);
  for (std::size_t n = 0; n < s.n; ++n) {
    auto x = input.sample(n);
    for (std::size_t o = 0; o < layer.out; ++o) {
      T acc = layer.bias[o];
      const T* w = layer.weight.data() + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) acc += w[i] * x[i];
      out[n * layer.out + o] = acc;
    }
  }
  return out;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  std::vector<T> weight;
  std::vector<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& input, const Linear<T>& layer,
                               const Tensor<T>& grad_out) {
  const Shape& s = input.shape();
  if (grad_out.shape() != Shape{s.n, layer.out, 1, 1} || s.sample() != layer.in) {
    throw ShapeError("linear_backward: grad " + grad_out.shape().str() + " for input " + s.str());
  }
  LinearGrads<T> g{Tensor<T>(s), std::vector<T>(layer.weight.size(), T(0)),
                   std::vector<T>(layer.out, T(0))};
  for (std::size_t n = 0; n < s.n; ++n) {
    auto x = input.sample(n);
    auto dx = g.input.sample(n);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const T dy = grad_out[n * layer.out + o];
      g.bias[o] += dy;
      const T* w = layer.weight.data() + o * layer.in;
      T* dw = g.weight.data() + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) {
        dw[i] += dy * x[i];
        dx[i] += dy * w[i];
      }
    }
  }
  return g;
}

/// Mean softmax cross-entropy over the batch; fills grad with d(loss)/d(logits).
template <typename T>
T softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tensor<T>* grad) {
  const Shape& s = logits.shape();
  const std::size_t classes = s.sample();
  if (labels.size() != s.n) {
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(s.n));
  }
  if (grad != nullptr) *grad = Tensor<T>(s);
  T total = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    auto z = logits.sample(n);
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ShapeError("label " + std::to_string(y) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
    T zmax = z[0];
    for (T v : z) zmax = std::max(zmax, v);
    T denom = 0;
    for (T v : z) denom += std::exp(v - zmax);
    const T log_denom = std::log(denom);
    total += -(z[static_cast<std::size_t>(y)] - zmax - log_denom);
    if (grad != nullptr) {
      auto dz = grad->sample(n);
      for (std::size_t c = 0; c < classes; ++c) {
        const T p = std::exp(z[c] - zmax - log_denom);
        dz[c] = (p - (static_cast<std::size_t>(y) == c ? T(1) : T(0))) / static_cast<T>(s.n);
      }
    }
  }
  return total / static_cast<T>(s.n);
}

}  // namespace dgc
