// SPDX-License-Identifier: Apache-2.0
//
// Epoch loop: gradual pruning schedule, loss assembly (cross-entropy, saliency
// lasso, angle penalty), Nesterov SGD with cosine decay, global threshold
// maintenance, and evaluation.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dgc/config.hpp"
#include "dgc/dataset.hpp"
#include "dgc/global_threshold.hpp"
#include "dgc/mac.hpp"
#include "dgc/model.hpp"
#include "dgc/optim.hpp"
#include "dgc/schedule.hpp"

namespace dgc {

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Builds the train/test splits named by the config and standardizes both
/// with the training-set channel statistics.
inline DataSplits load_splits(const TrainConfig& c) {
  DataSplits s;
  if (c.dataset == "cifar10") {
    if (c.data_dir.empty()) throw ConfigError("config key 'data_dir': required for dataset = cifar10");
    s.train = take_classes(load_cifar10_dir(c.data_dir, true), c.classes, c.train_count);
    s.test = take_classes(load_cifar10_dir(c.data_dir, false), c.classes, c.test_count);
  } else {
    SynthSpec spec;
    spec.seed = c.seed;
    spec.classes = c.classes;
    spec.noise = c.synth_noise;
    spec.jitter = c.synth_jitter;
    spec.count = c.train_count;
    s.train = synth_dataset(spec);
    spec.first_index = c.train_count;
    spec.count = c.test_count;
    s.test = synth_dataset(spec);
  }
  if (s.train.size() == 0 || s.test.size() == 0) throw DataError("dataset split is empty");
  const Normalization norm = channel_statistics(s.train);
  standardize(s.train, norm);
  standardize(s.test, norm);
  return s;
}

template <typename T>
struct TrainerState {
  TrainConfig config;
  Network<T> net;
  OptimState<T> optim;
  GlobalThresholdState global;
  SaliencyLibrary<T> library;
  std::mt19937_64 rng;
  std::size_t epoch = 0;  // next epoch to run

  PruneSchedule schedule() const { return {config.epochs, config.prune_rate}; }

  /// Gate used for training batches in the given epoch.
  GateSpec train_gate(std::size_t e) const {
    if (config.gating == GatingMode::Global) return GateSpec::global(global.threshold);
    return GateSpec::head_wise(prune_rate_at(e, schedule()));
  }

  /// Gate for evaluation: target rate (head-wise) or the frozen threshold.
  GateSpec eval_gate() const {
    if (config.gating == GatingMode::Global) return GateSpec::global(global.threshold);
    return GateSpec::head_wise(config.prune_rate);
  }
};

template <typename T>
TrainerState<T> make_trainer(const TrainConfig& cfg) {
  cfg.validate();
  TrainerState<T> s;
  s.config = cfg;
  s.net = Network<T>(cfg.model(), cfg.seed);
  s.optim.momentum = static_cast<T>(cfg.momentum);
  s.optim.weight_decay = static_cast<T>(cfg.weight_decay);
  s.global.period = cfg.threshold_period;
  s.global.iterations = cfg.threshold_iterations;
  s.global.batch = cfg.batch_size;
  s.library = SaliencyLibrary<T>(s.global.library_capacity(), s.net.saliency_row_length());
  s.rng.seed(cfg.seed ^ 0x5eed5eed5eedULL);
  return s;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double prune_rate = 0;   // scheduled rate
  double threshold = 0;    // global threshold after the epoch
  double loss = 0;
  double cross_entropy = 0;
  double lasso = 0;
  double angle = 0;
  double accuracy = 0;
  double realized_prune_rate = 0;
  double mean_abs_cos = 0;
  std::vector<double> layer_prune_rates;
  std::string note;  // e.g. empty-library warning

  bool operator==(const EpochMetrics&) const = default;
};

namespace detail {

/// Pruned (sample, head, channel) slots per DGC layer and in total.
template <typename T>
struct PruneCounter {
  std::vector<double> pruned;
  std::vector<double> slots;

  void add(const ForwardPass<T>& pass, const Network<T>& net) {
    std::size_t l = 0;
    if (pruned.empty()) {
      pruned.assign(pass.decisions.size(), 0.0);
      slots.assign(pass.decisions.size(), 0.0);
    }
    for (const auto& b : net.blocks) {
      if (b.spec.kind != LayerKind::Dgc) continue;
      for (const auto& row : pass.decisions[l]) {
        for (const auto& d : row) {
          pruned[l] += static_cast<double>(b.in_channels - d.indices.size());
          slots[l] += static_cast<double>(b.in_channels);
        }
      }
      ++l;
    }
  }

  std::vector<double> per_layer() const {
    std::vector<double> r(pruned.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = slots[i] > 0 ? pruned[i] / slots[i] : 0.0;
    return r;
  }

  double overall() const {
    const double s = std::accumulate(slots.begin(), slots.end(), 0.0);
    return s > 0 ? std::accumulate(pruned.begin(), pruned.end(), 0.0) / s : 0.0;
  }
};

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    auto row = logits.sample(n);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == labels[n] ? 1 : 0;
  }
  return correct;
}

}  // namespace detail

/// One pass of mini-batch SGD over `data` for epoch state.epoch, then the
/// epoch counter advances.
template <typename T>
EpochMetrics train_epoch(TrainerState<T>& state, const Dataset& data) {
  const TrainConfig& cfg = state.config;
  const std::size_t e = state.epoch;
  require(e < cfg.epochs, "train_epoch: epoch " + std::to_string(e) + " beyond schedule of " +
                              std::to_string(cfg.epochs));
  require(data.size() > 0, "train_epoch: empty dataset");
  EpochMetrics m;
  m.epoch = e;
  m.lr = cosine_lr(e, cfg.epochs, cfg.lr);
  m.prune_rate = prune_rate_at(e, state.schedule());
  const GateSpec gate = state.train_gate(e);
  const Augment aug{cfg.augment, cfg.augment};
  const double lambda_a = cfg.angle_weight();

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), state.rng);
  const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const bool global = cfg.gating == GatingMode::Global;
  if (global && state.global.is_update_epoch(e)) state.library.clear();

  state.net.set_training(true);
  detail::PruneCounter<T> counter;
  double ce_sum = 0, lasso_sum = 0, angle_sum = 0, cos_sum = 0;
  std::size_t correct = 0;
  for (std::size_t it = 0; it < batches; ++it) {
    const std::size_t begin = it * cfg.batch_size;
    const std::size_t end = std::min(data.size(), begin + cfg.batch_size);
    const std::span<const std::size_t> idx(order.data() + begin, end - begin);
    const Batch<T> batch = make_batch<T>(data, idx, aug, state.rng);
    const double weight = static_cast<double>(idx.size());

    ForwardPass<T> pass = state.net.forward(batch.images, gate, cfg.threads);
    Tensor<T> grad_logits;
    const T ce = softmax_cross_entropy(pass.logits, std::span<const int>(batch.labels), &grad_logits);
    const T lasso = lasso_loss(pass.saliency, cfg.lasso);
    const T angle = lambda_a > 0 ? angle_loss(pass.saliency, lambda_a) : T(0);
    if (!std::isfinite(static_cast<double>(ce + lasso + angle))) {
      throw NumericError("non-finite loss at epoch " + std::to_string(e) + ", batch " + std::to_string(it) +
                         " (cross-entropy " + std::to_string(static_cast<double>(ce)) + ", lasso " +
                         std::to_string(static_cast<double>(lasso)) + ", angle " +
                         std::to_string(static_cast<double>(angle)) + ")");
    }
    ce_sum += static_cast<double>(ce) * weight;
    lasso_sum += static_cast<double>(lasso) * weight;
    angle_sum += static_cast<double>(angle) * weight;
    cos_sum += static_cast<double>(mean_pairwise_abs_cos(pass.saliency)) * weight;
    correct += detail::count_correct(pass.logits, std::span<const int>(batch.labels));
    counter.add(pass, state.net);

    SaliencySet<T> sal_grad = lasso_grad(pass.saliency, cfg.lasso);
    if (lambda_a > 0) {
      const SaliencySet<T> ag = angle_grad(pass.saliency, lambda_a);
      for (std::size_t l = 0; l < sal_grad.size(); ++l) {
        for (std::size_t h = 0; h < sal_grad[l].size(); ++h) {
          auto dst = sal_grad[l][h].span();
          auto src = ag[l][h].span();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
    }
    state.net.backward(grad_logits, sal_grad, cfg.threads);
    auto params = state.net.params();
    try {
      sgd_nesterov_step(std::span<ParamRef<T>>(params), static_cast<T>(m.lr), state.optim);
    } catch (const NumericError& err) {
      throw NumericError(std::string(err.what()) + " at epoch " + std::to_string(e) + ", batch " +
                         std::to_string(it));
    }

    if (global && state.global.collects(e, it, batches)) {
      state.library.collect(pass.saliency, state.net.heads_per_dgc_layer());
    }
  }

  const double total = static_cast<double>(data.size());
  m.cross_entropy = ce_sum / total;
  m.lasso = lasso_sum / total;
  m.angle = angle_sum / total;
  m.loss = m.cross_entropy + m.lasso + m.angle;
  m.accuracy = static_cast<double>(correct) / total;
  m.mean_abs_cos = cos_sum / total;
  m.realized_prune_rate = counter.overall();
  m.layer_prune_rates = counter.per_layer();

  if (global) {
    const auto r = maybe_update_threshold(state.global, e, state.library, m.prune_rate);
    if (r == ThresholdUpdate::EmptyLibrary) m.note = "saliency library empty; threshold kept";
  }
  m.threshold = state.global.threshold;
  ++state.epoch;
  return m;
}

struct EvalMetrics {
  std::size_t samples = 0;
  double accuracy = 0;
  double realized_prune_rate = 0;
  std::vector<double> layer_prune_rates;     // DGC layers only
  std::vector<double> layer_macs;            // every layer, mean per sample
  std::vector<std::uint64_t> layer_dense_macs;
  double macs_per_sample = 0;
  std::uint64_t dense_macs_per_sample = 0;
  double mean_abs_cos = 0;

  bool operator==(const EvalMetrics&) const = default;
};

/// Inference-mode evaluation (BN running statistics, gate fixed).
template <typename T>
EvalMetrics evaluate(Network<T>& net, const Dataset& data, const GateSpec& gate, std::size_t batch_size = 100,
                     std::size_t threads = 1) {
  if (!net.stats_ready()) throw StateError("evaluation requested before batch-norm statistics were set");
  require(data.size() > 0, "evaluate: empty dataset");
  net.set_training(false);
  EvalMetrics m;
  m.samples = data.size();
  m.layer_macs.assign(net.blocks.size(), 0.0);
  for (const auto& b : net.blocks) {
    m.layer_dense_macs.push_back(mac_dense(b.mac_shape()));
    m.dense_macs_per_sample += mac_dense(b.mac_shape());
  }
  detail::PruneCounter<T> counter;
  std::size_t correct = 0;
  double cos_sum = 0;
  std::vector<std::size_t> idx;
  try {
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
      const std::size_t end = std::min(data.size(), begin + batch_size);
      idx.resize(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      const Batch<T> batch = make_batch<T>(data, idx);
      const ForwardPass<T> pass = net.forward(batch.images, gate, threads);
      correct += detail::count_correct(pass.logits, std::span<const int>(batch.labels));
      cos_sum += static_cast<double>(mean_pairwise_abs_cos(pass.saliency)) * static_cast<double>(idx.size());
      counter.add(pass, net);
      std::size_t l = 0;
      for (std::size_t i = 0; i < net.blocks.size(); ++i) {
        const auto& b = net.blocks[i];
        if (b.spec.kind != LayerKind::Dgc) {
          const std::uint64_t cost = m.layer_dense_macs[i] / (b.spec.kind == LayerKind::Sgc ? b.spec.groups : 1);
          m.layer_macs[i] += static_cast<double>(cost) * static_cast<double>(idx.size());
          continue;
        }
        std::vector<std::size_t> kept(b.dgc.config.heads);
        for (const auto& row : pass.decisions[l]) {
          for (std::size_t h = 0; h < row.size(); ++h) kept[h] = row[h].indices.size();
          m.layer_macs[i] += static_cast<double>(mac_dgc_counts(b.mac_shape(), kept, b.dgc.config.squeeze).total());
        }
        ++l;
      }
    }
  } catch (...) {
    net.set_training(true);
    throw;
  }
  net.set_training(true);
  const double n = static_cast<double>(data.size());
  m.accuracy = static_cast<double>(correct) / n;
  m.mean_abs_cos = cos_sum / n;
  m.realized_prune_rate = counter.overall();
  m.layer_prune_rates = counter.per_layer();
  for (double& v : m.layer_macs) v /= n;
  m.macs_per_sample = std::accumulate(m.layer_macs.begin(), m.layer_macs.end(), 0.0);
  return m;
}

}  // namespace dgc
