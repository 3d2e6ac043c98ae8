// SPDX-License-Identifier: Apache-2.0
//
// dgc_cli train | eval | bench | visualize
//
// Exit status: 0 success, 1 usage or input error, 2 numeric failure,
// 3 assertion (ordering) failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dgc/dgc.hpp"

namespace fs = std::filesystem;
using namespace dgc;

namespace {

constexpr int kUsage = 1;
constexpr int kNumeric = 2;
constexpr int kAssertion = 3;

struct TrainArgs {
  std::string config;
  std::string resume;
  std::string out = "run";
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::size_t save_every = 0;
};

struct EvalArgs {
  std::string checkpoint;
  std::string dataset = "test";
  std::string out;
  std::size_t threads = 1;
};

struct BenchArgs {
  std::string shapes = "64x56,128x28,256x14,512x7";
  std::string variants = "dense,sgc,dgc";
  std::size_t groups = 4;
  double prune_rate = 0.75;
  std::size_t heads = 4;
  std::size_t squeeze = 16;
  std::size_t repeats = 30;
  std::size_t warmups = 5;
  std::size_t threads = 1;
  std::uint64_t seed = 1;
  std::string out;
  bool assert_ordering = false;
};

struct VisualizeArgs {
  std::string checkpoint;
  std::string dataset = "test";
  std::size_t first = 0;
  std::size_t images = 16;
  std::string layers;
  bool contributions = false;
  std::string out = "vis";
};

/// "test", "train", or a CIFAR-10 binary file standardized with the
/// training statistics.
Dataset pick_dataset(const TrainConfig& cfg, const std::string& which) {
  DataSplits splits = load_splits(cfg);
  if (which == "test") return std::move(splits.test);
  if (which == "train") return std::move(splits.train);
  if (!fs::exists(which)) throw DataError("dataset '" + which + "' is neither train, test, nor an existing file");
  DataSplits raw;
  Dataset file = take_classes(load_cifar10({which}), cfg.classes, 0);
  // Standardize with the statistics of the unstandardized training split.
  if (cfg.dataset == "cifar10") {
    raw.train = take_classes(load_cifar10_dir(cfg.data_dir, true), cfg.classes, cfg.train_count);
  } else {
    SynthSpec spec;
    spec.seed = cfg.seed;
    spec.classes = cfg.classes;
    spec.noise = cfg.synth_noise;
    spec.jitter = cfg.synth_jitter;
    spec.count = cfg.train_count;
    raw.train = synth_dataset(spec);
  }
  standardize(file, channel_statistics(raw.train));
  return file;
}

template <typename T>
int run_train(TrainConfig cfg, const TrainArgs& a) {
  TrainerState<T> state = a.resume.empty() ? make_trainer<T>(cfg) : load_checkpoint<T>(a.resume);
  if (!a.resume.empty()) {
    if (a.epochs) state.config.epochs = *a.epochs;
    if (a.threads) state.config.threads = *a.threads;
    cfg = state.config;
  }
  const DataSplits data = load_splits(cfg);
  fs::create_directories(a.out);
  std::ofstream metrics(fs::path(a.out) / "metrics.csv");
  if (!metrics) throw std::runtime_error("cannot write metrics into '" + a.out + "'");
  write_metrics_header(metrics, cfg, state.net.dgc_count());
  std::cout << "# seed=" << cfg.seed << " epochs=" << cfg.epochs << " start=" << state.epoch << "\n";
  while (state.epoch < cfg.epochs) {
    const EpochMetrics m = train_epoch(state, data.train);
    write_metrics_row(metrics, m);
    metrics.flush();
    std::cout << "epoch " << m.epoch << " loss " << m.loss << " acc " << m.accuracy << " prune "
              << m.realized_prune_rate << (m.note.empty() ? "" : " warning: " + m.note) << std::endl;
    if (a.save_every > 0 && state.epoch % a.save_every == 0 && state.epoch < cfg.epochs) {
      save_checkpoint(state, fs::path(a.out) / ("checkpoint_e" + std::to_string(state.epoch)));
    }
  }
  save_checkpoint(state, fs::path(a.out) / "checkpoint");
  const EvalMetrics ev = evaluate(state.net, data.test, state.eval_gate(), 100, cfg.threads);
  std::cout << "test top1 " << ev.accuracy << " prune " << ev.realized_prune_rate << " macs/sample "
            << ev.macs_per_sample << "\n";
  return 0;
}

template <typename T>
int run_eval(const EvalArgs& a) {
  TrainerState<T> state = load_checkpoint<T>(a.checkpoint);
  const Dataset data = pick_dataset(state.config, a.dataset);
  const EvalMetrics m = evaluate(state.net, data, state.eval_gate(), 100, a.threads);
  std::ostringstream comment;
  comment << "seed=" << state.config.seed << " checkpoint=" << a.checkpoint << " dataset=" << a.dataset
          << " samples=" << m.samples << " threshold=" << exact(state.global.threshold);
  const auto rows = eval_rows(state.net, m);
  write_eval_table(std::cout, rows, comment.str());
  if (!a.out.empty()) {
    std::ofstream os(a.out);
    if (!os) throw std::runtime_error("cannot write '" + a.out + "'");
    write_eval_table(os, rows, comment.str());
  }
  return 0;
}

int run_bench(const BenchArgs& a) {
  std::vector<BenchVariant> variants;
  std::stringstream ss(a.variants);
  for (std::string v; std::getline(ss, v, ',');) {
    if (v == "dense") variants.push_back({VariantKind::Dense});
    else if (v == "sgc") variants.push_back({VariantKind::Sgc, a.groups});
    else if (v == "dgc") variants.push_back({VariantKind::Dgc, 1, a.prune_rate, a.heads, a.squeeze});
    else throw std::invalid_argument("unknown variant '" + v + "' (expected dense, sgc, dgc)");
  }
  if (a.repeats < 2) std::cerr << "warning: --repeats " << a.repeats << " gives no reliable dispersion estimate\n";
  BenchOptions opt;
  opt.repeats = a.repeats;
  opt.warmups = a.warmups;
  opt.threads = a.threads;
  opt.seed = a.seed;
  const auto rows = run_benchmark(parse_bench_shapes(a.shapes), variants, opt);
  write_bench_csv(std::cout, rows, a.seed);
  if (!a.out.empty()) {
    std::ofstream os(a.out);
    if (!os) throw std::runtime_error("cannot write '" + a.out + "'");
    write_bench_csv(os, rows, a.seed);
  }
  if (a.assert_ordering) {
    const std::string problems = check_ordering(rows);
    if (!problems.empty()) {
      std::cerr << "ordering sgc <= dgc <= dense violated: " << problems << "\n";
      return kAssertion;
    }
  }
  return 0;
}

template <typename T>
int run_visualize(const VisualizeArgs& a) {
  TrainerState<T> state = load_checkpoint<T>(a.checkpoint);
  const Dataset all = pick_dataset(state.config, a.dataset);
  if (a.first >= all.size() || a.images == 0) {
    throw std::invalid_argument("image range is empty (dataset has " + std::to_string(all.size()) + " images)");
  }
  Dataset subset = all;
  const std::size_t end = std::min(all.size(), a.first + a.images);
  subset.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(a.first),
                       all.labels.begin() + static_cast<std::ptrdiff_t>(end));
  subset.pixels.assign(all.pixels.begin() + static_cast<std::ptrdiff_t>(a.first * all.sample_size()),
                       all.pixels.begin() + static_cast<std::ptrdiff_t>(end * all.sample_size()));
  std::vector<std::size_t> layers;
  std::stringstream ss(a.layers);
  for (std::string v; std::getline(ss, v, ',');) {
    if (!v.empty()) layers.push_back(std::stoul(v));
  }
  const auto bundle = visualize(state.net, subset, state.eval_gate(), layers, a.contributions);
  write_visualization(bundle, a.out, state.config.seed);
  std::cout << "# seed=" << state.config.seed << " images=" << bundle.images << "\nlayer,prune_rate\n";
  for (const auto& lv : bundle.layers) std::cout << lv.layer << "," << exact(lv.prune_rate) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic group convolution: train, evaluate, benchmark, visualize"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a network from a config file");
  train->add_option("--config", ta.config, "Config file (key = value)");
  train->add_option("--resume", ta.resume, "Checkpoint to resume from (its config is used)");
  train->add_option("--out", ta.out, "Output directory for metrics.csv and checkpoint")->capture_default_str();
  train->add_option("--epochs", ta.epochs, "Override the number of epochs");
  train->add_option("--seed", ta.seed, "Override the seed");
  train->add_option("--threads", ta.threads, "Worker threads");
  train->add_option("--save-every", ta.save_every, "Also save checkpoint_e<N> every N epochs");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint manifest")->required();
  eval->add_option("--dataset", ea.dataset, "test, train, or a CIFAR-10 binary file")->capture_default_str();
  eval->add_option("--out", ea.out, "Also write the table to this file");
  eval->add_option("--threads", ea.threads, "Worker threads")->capture_default_str();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Time dense, SGC and DGC layer forward passes");
  bench->add_option("--shapes", ba.shapes, "Comma list of <channels>x<extent>")->capture_default_str();
  bench->add_option("--variants", ba.variants, "Comma list of dense, sgc, dgc")->capture_default_str();
  bench->add_option("--groups", ba.groups, "SGC groups")->capture_default_str();
  bench->add_option("--prune-rate", ba.prune_rate, "DGC pruning rate")->capture_default_str();
  bench->add_option("--heads", ba.heads, "DGC heads")->capture_default_str();
  bench->add_option("--squeeze", ba.squeeze, "DGC squeeze ratio")->capture_default_str();
  bench->add_option("--repeats", ba.repeats, "Timed repetitions")->capture_default_str();
  bench->add_option("--warmups", ba.warmups, "Untimed warm-up passes")->capture_default_str();
  bench->add_option("--threads", ba.threads, "Worker threads")->capture_default_str();
  bench->add_option("--seed", ba.seed, "Seed for weights and inputs")->capture_default_str();
  bench->add_option("--out", ba.out, "Also write the table to this file");
  bench->add_flag("--assert-ordering", ba.assert_ordering, "Exit 3 unless sgc <= dgc <= dense on medians");

  VisualizeArgs va;
  auto* vis = app.add_subcommand("visualize", "Export saliency and gating data for a set of images");
  vis->add_option("--checkpoint", va.checkpoint, "Checkpoint manifest")->required();
  vis->add_option("--dataset", va.dataset, "test, train, or a CIFAR-10 binary file")->capture_default_str();
  vis->add_option("--first", va.first, "First image of the set")->capture_default_str();
  vis->add_option("--images", va.images, "Number of images")->capture_default_str();
  vis->add_option("--layers", va.layers, "Comma list of layer indices (default: all DGC layers)");
  vis->add_flag("--contributions", va.contributions, "Also export input-to-output contribution matrices");
  vis->add_option("--out", va.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train) {
      if (ta.config.empty() && ta.resume.empty()) throw ConfigError("train needs --config or --resume");
      if (!ta.resume.empty()) {
        const std::string p = checkpoint_precision(ta.resume);
        return p == "float" ? run_train<float>({}, ta) : run_train<double>({}, ta);
      }
      TrainConfig cfg = load_config(ta.config);
      if (ta.epochs) cfg.epochs = *ta.epochs;
      if (ta.seed) cfg.seed = *ta.seed;
      if (ta.threads) cfg.threads = *ta.threads;
      cfg.validate();
      return cfg.precision == Precision::Float ? run_train<float>(cfg, ta) : run_train<double>(cfg, ta);
    }
    if (*eval) {
      return checkpoint_precision(ea.checkpoint) == "float" ? run_eval<float>(ea) : run_eval<double>(ea);
    }
    if (*bench) return run_bench(ba);
    if (*vis) {
      return checkpoint_precision(va.checkpoint) == "float" ? run_visualize<float>(va) : run_visualize<double>(va);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
