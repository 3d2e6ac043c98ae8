// SPDX-License-Identifier: Apache-2.0
//
// Training configuration as flat "key = value" text. Lines starting with '#'
// are comments. Unknown keys are rejected.
//
//   model                 layer list, e.g. conv:16:3:2,dgc:16:3:1,dgc:32:3:2,dgc:64:3:2
//   heads, squeeze        DGC heads and squeeze ratio d
//   bias_init             initial saliency bias
//   dataset               synthetic | cifar10
//   data_dir              cifar-10-batches-bin directory (cifar10 only)
//   classes               classes kept (cifar10: labels below this value)
//   train_count           training samples (0 = all, cifar10 only)
//   test_count            test samples (0 = all, cifar10 only)
//   synth_noise           pixel noise of the synthetic generator
//   synth_jitter          per-sample frequency/orientation spread of the generator
//   augment               true | false (pad-4 crop and horizontal flip)
//   epochs, batch_size, lr, momentum, weight_decay
//   prune_rate            target pruning rate
//   gating                headwise | global
//   lasso                 saliency L1 weight
//   angle                 angle-loss weight (default 1e-4 for global gating, 0 otherwise)
//   threshold_period      epochs between global threshold updates
//   threshold_iterations  iterations collected into the saliency library
//   seed, threads
//   precision             float | double
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgc/dgc_layer.hpp"
#include "dgc/model.hpp"

namespace dgc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { Float, Double };

struct TrainConfig {
  std::vector<LayerSpec> layers = parse_topology("conv:16:3:2,dgc:16:3:1,dgc:32:3:2,dgc:64:3:2");
  std::size_t heads = 4;
  std::size_t squeeze = 8;
  double bias_init = 0.1;

  std::string dataset = "synthetic";
  std::string data_dir;
  std::size_t classes = 2;
  std::size_t train_count = 2000;
  std::size_t test_count = 400;
  double synth_noise = 0.3;
  double synth_jitter = 0.3;
  bool augment = true;

  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double prune_rate = 0.5;
  GatingMode gating = GatingMode::HeadWise;
  double lasso = 1e-5;
  std::optional<double> angle;
  std::size_t threshold_period = 3;
  std::size_t threshold_iterations = 5;

  std::uint64_t seed = 1;
  std::size_t threads = 1;
  Precision precision = Precision::Float;

  double angle_weight() const { return angle.value_or(gating == GatingMode::Global ? 1e-4 : 0.0); }

  ModelConfig model() const {
    ModelConfig m;
    m.layers = layers;
    m.in_channels = 3;
    m.image_size = 32;
    m.classes = classes;
    m.heads = heads;
    m.squeeze = squeeze;
    m.bias_init = bias_init;
    return m;
  }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); };
    if (epochs == 0) fail("epochs", "must be positive");
    if (batch_size == 0) fail("batch_size", "must be positive");
    if (!(lr >= 0)) fail("lr", "must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must lie in [0, 1)");
    if (!(weight_decay >= 0)) fail("weight_decay", "must be non-negative");
    if (!(prune_rate >= 0 && prune_rate < 1)) fail("prune_rate", "must lie in [0, 1)");
    if (!(lasso >= 0)) fail("lasso", "must be non-negative");
    if (!(angle_weight() >= 0)) fail("angle", "must be non-negative");
    if (classes < 2) fail("classes", "need at least two");
    if (dataset != "synthetic" && dataset != "cifar10") fail("dataset", "expected synthetic or cifar10");
    if (dataset == "cifar10" && classes > 10) fail("classes", "CIFAR-10 has ten classes");
    if (dataset == "synthetic" && (train_count == 0 || test_count == 0)) fail("train_count", "synthetic splits need explicit sizes");
    if (threshold_period == 0) fail("threshold_period", "must be positive");
    if (threshold_iterations == 0) fail("threshold_iterations", "must be positive");
    if (threads == 0) fail("threads", "must be positive");
    try {
      Network<double> probe(model(), 0);
    } catch (const std::exception& e) {
      fail("model", e.what());
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Applies one key/value pair; throws ConfigError naming the key.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_size = [&] {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(value, &pos);
      if (pos != value.size() || value.front() == '-') throw std::invalid_argument(value);
      return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
    }
  };
  auto as_double = [&] {
    try {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    }
  };
  auto as_bool = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
  };
  if (key == "model") {
    try {
      c.layers = parse_topology(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config key 'model': " + std::string(e.what()));
    }
  } else if (key == "heads") c.heads = as_size();
  else if (key == "squeeze") c.squeeze = as_size();
  else if (key == "bias_init") c.bias_init = as_double();
  else if (key == "dataset") c.dataset = value;
  else if (key == "data_dir") c.data_dir = value;
  else if (key == "classes") c.classes = as_size();
  else if (key == "train_count") c.train_count = as_size();
  else if (key == "test_count") c.test_count = as_size();
  else if (key == "synth_noise") c.synth_noise = as_double();
  else if (key == "synth_jitter") c.synth_jitter = as_double();
  else if (key == "augment") c.augment = as_bool();
  else if (key == "epochs") c.epochs = as_size();
  else if (key == "batch_size") c.batch_size = as_size();
  else if (key == "lr") c.lr = as_double();
  else if (key == "momentum") c.momentum = as_double();
  else if (key == "weight_decay") c.weight_decay = as_double();
  else if (key == "prune_rate") c.prune_rate = as_double();
  else if (key == "gating") {
    if (value == "headwise") c.gating = GatingMode::HeadWise;
    else if (value == "global") c.gating = GatingMode::Global;
    else throw ConfigError("config key 'gating': expected headwise or global, got '" + value + "'");
  } else if (key == "lasso") c.lasso = as_double();
  else if (key == "angle") c.angle = as_double();
  else if (key == "threshold_period") c.threshold_period = as_size();
  else if (key == "threshold_iterations") c.threshold_iterations = as_size();
  else if (key == "seed") c.seed = as_size();
  else if (key == "threads") c.threads = as_size();
  else if (key == "precision") {
    if (value == "float") c.precision = Precision::Float;
    else if (value == "double") c.precision = Precision::Double;
    else throw ConfigError("config key 'precision': expected float or double, got '" + value + "'");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    set_config_value(c, key, value);
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const TrainConfig& c) {
  using detail::format_double;
  std::ostringstream os;
  os << "model = " << format_topology(c.layers) << "\n"
     << "heads = " << c.heads << "\n"
     << "squeeze = " << c.squeeze << "\n"
     << "bias_init = " << format_double(c.bias_init) << "\n"
     << "dataset = " << c.dataset << "\n";
  if (!c.data_dir.empty()) os << "data_dir = " << c.data_dir << "\n";
  os << "classes = " << c.classes << "\n"
     << "train_count = " << c.train_count << "\n"
     << "test_count = " << c.test_count << "\n"
     << "synth_noise = " << format_double(c.synth_noise) << "\n"
     << "synth_jitter = " << format_double(c.synth_jitter) << "\n"
     << "augment = " << (c.augment ? "true" : "false") << "\n"
     << "epochs = " << c.epochs << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "lr = " << format_double(c.lr) << "\n"
     << "momentum = " << format_double(c.momentum) << "\n"
     << "weight_decay = " << format_double(c.weight_decay) << "\n"
     << "prune_rate = " << format_double(c.prune_rate) << "\n"
     << "gating = " << (c.gating == GatingMode::Global ? "global" : "headwise") << "\n"
     << "lasso = " << format_double(c.lasso) << "\n";
  if (c.angle) os << "angle = " << format_double(*c.angle) << "\n";
  os << "threshold_period = " << c.threshold_period << "\n"
     << "threshold_iterations = " << c.threshold_iterations << "\n"
     << "seed = " << c.seed << "\n"
     << "threads = " << c.threads << "\n"
     << "precision = " << (c.precision == Precision::Float ? "float" : "double") << "\n";
  return os.str();
}

}  // namespace dgc
