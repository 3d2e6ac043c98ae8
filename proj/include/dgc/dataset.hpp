// SPDX-License-Identifier: Apache-2.0
//
// Image datasets: CIFAR-10 binary files or a seeded class-conditional
// generator, per-channel standardization, and augmented mini-batches.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgc/tensor.hpp"

namespace dgc {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::size_t channels = 3;
  std::size_t extent = 32;  // square images
  std::size_t classes = 10;
  std::vector<float> pixels;  // sample-major, then channel, row, column
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return channels * extent * extent; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * sample_size(), sample_size());
  }
};

inline constexpr std::size_t kCifarRecord = 3073;

/// Reads CIFAR-10 binary batches: each record is one label byte (0-9)
/// followed by 3072 bytes, the R, G and B planes in row-major order. Pixels
/// are scaled to [0, 1].
inline Dataset load_cifar10(const std::vector<std::filesystem::path>& files) {
  Dataset ds;
  ds.channels = 3;
  ds.extent = 32;
  ds.classes = 10;
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open CIFAR file '" + path.string() + "'");
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecord != 0) {
      throw DataError("CIFAR file '" + path.string() + "' has " + std::to_string(bytes.size()) +
                      " bytes; record " + std::to_string(bytes.size() / kCifarRecord) + " is truncated (records are " +
                      std::to_string(kCifarRecord) + " bytes)");
    }
    const std::size_t records = bytes.size() / kCifarRecord;
    for (std::size_t r = 0; r < records; ++r) {
      const unsigned char* rec = bytes.data() + r * kCifarRecord;
      if (rec[0] > 9) {
        throw DataError("CIFAR file '" + path.string() + "' record " + std::to_string(r) + " has label " +
                        std::to_string(rec[0]) + " (expected 0-9)");
      }
      ds.labels.push_back(rec[0]);
      for (std::size_t i = 1; i < kCifarRecord; ++i) ds.pixels.push_back(static_cast<float>(rec[i]) / 255.0f);
    }
  }
  return ds;
}

/// The five training batches or the test batch of an extracted
/// cifar-10-batches-bin directory.
inline Dataset load_cifar10_dir(const std::filesystem::path& dir, bool train) {
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  return load_cifar10(files);
}

/// Keeps the first `count` samples (0 = all) whose label is below `classes`.
inline Dataset take_classes(const Dataset& ds, std::size_t classes, std::size_t count) {
  Dataset out;
  out.channels = ds.channels;
  out.extent = ds.extent;
  out.classes = classes;
  for (std::size_t i = 0; i < ds.size() && (count == 0 || out.size() < count); ++i) {
    if (static_cast<std::size_t>(ds.labels[i]) >= classes) continue;
    out.labels.push_back(ds.labels[i]);
    auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  std::size_t count = 0;
  std::size_t first_index = 0;  // disjoint index ranges give disjoint splits
  std::size_t extent = 32;
  double noise = 0.3;
  double jitter = 0.3;  // per-sample log-frequency and orientation spread
};

/// Class-conditional images: every class owns two oriented gratings; each
/// sample perturbs the grating frequencies and orientations (so classes
/// overlap) and draws a random phase, contrast, colour cast and pixel noise.
/// Labels cycle through the classes. Sample i depends only on (seed, i), so
/// splits drawn from disjoint index ranges share the classes.
inline Dataset synth_dataset(const SynthSpec& spec) {
  require(spec.classes >= 2, "synthetic data needs at least two classes");
  Dataset ds;
  ds.channels = 3;
  ds.extent = spec.extent;
  ds.classes = spec.classes;
  struct Proto {
    double fx[2], fy[2], weight[2];
  };
  std::vector<Proto> protos(spec.classes);
  std::mt19937_64 prng(spec.seed);
  std::uniform_real_distribution<double> freq(0.5, 3.5);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  for (auto& p : protos) {
    for (int k = 0; k < 2; ++k) {
      const double f = freq(prng);
      const double a = angle(prng);
      p.fx[k] = f * std::cos(a);
      p.fy[k] = f * std::sin(a);
      p.weight[k] = k == 0 ? 1.0 : 0.6;
    }
  }
  const std::size_t e = spec.extent;
  const double tau = 2.0 * std::numbers::pi / static_cast<double>(e);
  ds.pixels.resize(spec.count * ds.sample_size());
  ds.labels.resize(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t index = spec.first_index + i;
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> contrast(0.08, 0.2);
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::normal_distribution<double> wobble(0.0, spec.jitter);
    const int label = static_cast<int>(index % spec.classes);
    const Proto& p = protos[static_cast<std::size_t>(label)];
    const double ph[2] = {phase(rng), phase(rng)};
    const double amp = contrast(rng);
    std::uniform_real_distribution<double> cast(-0.08, 0.08);
    const double tint[3] = {cast(rng), cast(rng), cast(rng)};
    double fx[2], fy[2];
    for (int k = 0; k < 2; ++k) {
      const double scale = std::exp(wobble(rng));
      const double turn = wobble(rng);
      fx[k] = scale * (p.fx[k] * std::cos(turn) - p.fy[k] * std::sin(turn));
      fy[k] = scale * (p.fx[k] * std::sin(turn) + p.fy[k] * std::cos(turn));
    }
    float* img = ds.pixels.data() + i * ds.sample_size();
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < e; ++y) {
        for (std::size_t x = 0; x < e; ++x) {
          double v = 0.5 + tint[c];
          for (int k = 0; k < 2; ++k) {
            v += amp * p.weight[k] *
                 std::sin(tau * (fx[k] * static_cast<double>(x) + fy[k] * static_cast<double>(y)) + ph[k]);
          }
          v += noise(rng);
          img[(c * e + y) * e + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    ds.labels[i] = label;
  }
  return ds;
}

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stdev;
};

inline Normalization channel_statistics(const Dataset& ds) {
  require(ds.size() > 0, "channel statistics of an empty dataset");
  Normalization n{std::vector<double>(ds.channels, 0.0), std::vector<double>(ds.channels, 0.0)};
  const std::size_t plane = ds.extent * ds.extent;
  const double count = static_cast<double>(ds.size() * plane);
  for (std::size_t c = 0; c < ds.channels; ++c) {
    double sum = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t p = 0; p < plane; ++p) sum += ds.image(i)[c * plane + p];
    }
    const double mean = sum / count;
    double sq = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = ds.image(i)[c * plane + p] - mean;
        sq += d * d;
      }
    }
    n.mean[c] = mean;
    n.stdev[c] = std::max(std::sqrt(sq / count), 1e-8);
  }
  return n;
}

inline void standardize(Dataset& ds, const Normalization& n) {
  require(n.mean.size() == ds.channels && n.stdev.size() == ds.channels, "normalization channel count mismatch");
  const std::size_t plane = ds.extent * ds.extent;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    float* img = ds.pixels.data() + i * ds.sample_size();
    for (std::size_t c = 0; c < ds.channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        img[c * plane + p] = static_cast<float>((img[c * plane + p] - n.mean[c]) / n.stdev[c]);
      }
    }
  }
}

struct Augment {
  bool crop = false;  // zero-pad by 4, random crop back to size
  bool flip = false;  // horizontal flip with probability 1/2
  static constexpr std::size_t kPad = 4;
};

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// Assembles the samples `indices` into a batch, drawing crop offsets and
/// flips from `rng` in sample order.
template <typename T, typename Rng>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices, const Augment& aug, Rng& rng) {
  const std::size_t e = ds.extent;
  Batch<T> b{Tensor<T>(indices.size(), ds.channels, e, e), {}};
  std::uniform_int_distribution<int> offset(0, 2 * static_cast<int>(Augment::kPad));
  std::bernoulli_distribution coin(0.5);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const std::size_t idx = indices[n];
    require(idx < ds.size(), "batch index " + std::to_string(idx) + " out of range");
    b.labels.push_back(ds.labels[idx]);
    auto img = ds.image(idx);
    long dy = 0;
    long dx = 0;
    bool flip = false;
    if (aug.crop) {
      dy = offset(rng) - static_cast<long>(Augment::kPad);
      dx = offset(rng) - static_cast<long>(Augment::kPad);
    }
    if (aug.flip) flip = coin(rng);
    auto dst = b.images.sample(n);
    for (std::size_t c = 0; c < ds.channels; ++c) {
      for (std::size_t y = 0; y < e; ++y) {
        for (std::size_t x = 0; x < e; ++x) {
          const long sy = static_cast<long>(y) + dy;
          const long sxr = static_cast<long>(flip ? e - 1 - x : x) + dx;
          T v = T(0);
          if (sy >= 0 && sxr >= 0 && sy < static_cast<long>(e) && sxr < static_cast<long>(e)) {
            v = static_cast<T>(img[(c * e + static_cast<std::size_t>(sy)) * e + static_cast<std::size_t>(sxr)]);
          }
          dst[(c * e + y) * e + x] = v;
        }
      }
    }
  }
  return b;
}

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  std::mt19937_64 unused(0);
  return make_batch<T>(ds, indices, Augment{}, unused);
}

}  // namespace dgc
