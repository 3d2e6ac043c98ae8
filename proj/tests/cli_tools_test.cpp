// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dgc/dgc.hpp"

namespace fs = std::filesystem;
using namespace dgc;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / ("dgc_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  CliResult run(const std::string& args) const {
    const fs::path o = dir / "stdout.txt";
    const fs::path e = dir / "stderr.txt";
    const std::string cmd = std::string(DGC_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
  }

  fs::path write_config(const std::string& name, const std::string& extra = "") const {
    const fs::path p = dir / name;
    std::ofstream os(p);
    os << "# small synthetic task\n"
          "model = conv:8:3:2,dgc:8:3:1,dgc:16:3:2\n"
          "heads = 2\nsqueeze = 4\nclasses = 2\ntrain_count = 32\ntest_count = 16\n"
          "batch_size = 16\nepochs = 4\nprune_rate = 0.5\nseed = 5\n"
       << extra;
    return p;
  }
};

std::size_t data_lines(const std::string& csv) {
  std::size_t n = 0;
  std::istringstream in(csv);
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    ++n;
  }
  return n;
}

}  // namespace

TEST_F(Cli, HelpListsFlags) {
  const CliResult r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"train", "eval", "bench", "visualize"}) EXPECT_NE(r.out.find(s), std::string::npos) << s;
  const CliResult t = run("train --help");
  for (const char* s : {"--config", "--resume", "--out", "--threads", "--seed", "--epochs"}) {
    EXPECT_NE(t.out.find(s), std::string::npos) << s;
  }
  const CliResult b = run("bench --help");
  for (const char* s : {"--repeats", "--assert-ordering", "--threads", "--seed"}) {
    EXPECT_NE(b.out.find(s), std::string::npos) << s;
  }
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("bench --repeats many").code, 1);
}

TEST_F(Cli, MissingConfigNamesPath) {
  const CliResult r = run("train --config " + (dir / "nope.cfg").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nope.cfg"), std::string::npos) << r.err;
}

TEST_F(Cli, UnknownConfigKeyNamed) {
  const fs::path cfg = write_config("bad.cfg", "momentum_typo = 0.5\n");
  const CliResult r = run("train --config " + cfg.string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("momentum_typo"), std::string::npos) << r.err;
}

TEST_F(Cli, NonFiniteLossExitsTwo) {
  const fs::path cfg = write_config("nan.cfg", "lr = 1e30\n");
  const CliResult r = run("train --config " + cfg.string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("batch"), std::string::npos) << r.err;
}

TEST_F(Cli, OneEpochWritesOneMetricsLine) {
  const fs::path cfg = write_config("one.cfg");
  const CliResult r = run("train --config " + cfg.string() + " --epochs 1 --out " + (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "run" / "metrics.csv");
  EXPECT_EQ(data_lines(csv), 1u);
  EXPECT_NE(csv.find("# seed=5"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint"));
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint.blob"));
}

TEST_F(Cli, ResumeEqualsFreshRun) {
  const fs::path cfg = write_config("r.cfg", "gating = global\nthreshold_iterations = 1\n");
  ASSERT_EQ(run("train --config " + cfg.string() + " --save-every 2 --out " + (dir / "fresh").string()).code, 0);
  const CliResult r = run("train --resume " + (dir / "fresh" / "checkpoint_e2").string() + " --out " +
                    (dir / "resumed").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream fa(slurp(dir / "fresh" / "metrics.csv"));
  std::istringstream fb(slurp(dir / "resumed" / "metrics.csv"));
  const auto a = read_metrics(fa);
  const auto b = read_metrics(fb);
  ASSERT_EQ(a.size(), 4u);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0], a[2]);
  EXPECT_EQ(b[1], a[3]);
  EXPECT_EQ(slurp(dir / "fresh" / "checkpoint.blob"), slurp(dir / "resumed" / "checkpoint.blob"));
  EXPECT_EQ(slurp(dir / "fresh" / "checkpoint"), slurp(dir / "resumed" / "checkpoint"));
}

TEST_F(Cli, EvalIsRepeatableAndMatchesLibrary) {
  const fs::path cfg = write_config("e.cfg", "prune_rate = 0\nprecision = double\n");
  ASSERT_EQ(run("train --config " + cfg.string() + " --out " + (dir / "run").string()).code, 0);
  const std::string ck = (dir / "run" / "checkpoint").string();
  const CliResult a = run("eval --checkpoint " + ck);
  const CliResult b = run("eval --checkpoint " + ck + " --out " + (dir / "table.csv").string());
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(slurp(dir / "table.csv"), a.out);
  EXPECT_NE(a.out.find("seed=5"), std::string::npos);
  std::istringstream in(a.out);
  const auto rows = read_eval_table(in);
  ASSERT_EQ(rows.size(), 4u);

  auto state = load_checkpoint<double>(ck);
  const DataSplits d = load_splits(state.config);
  const EvalMetrics m = evaluate(state.net, d.test, GateSpec::head_wise(0.0));
  EXPECT_EQ(rows.back().top1, m.accuracy);
  EXPECT_EQ(rows.back().prune_rate, 0.0);
  for (std::size_t i : {1u, 2u}) {
    const MacReport mac = mac_dgc(state.net.blocks[i].mac_shape(), 0.0, 2, 4);
    EXPECT_EQ(rows[i].macs, static_cast<double>(mac.total()));
    EXPECT_EQ(rows[i].dense_macs, static_cast<double>(mac.dense));
  }
}

TEST_F(Cli, EvalOnTrainingSplitAndCifarFile) {
  const fs::path cfg = write_config("e.cfg");
  ASSERT_EQ(run("train --config " + cfg.string() + " --epochs 1 --out " + (dir / "run").string()).code, 0);
  const std::string ck = (dir / "run" / "checkpoint").string();
  EXPECT_EQ(run("eval --checkpoint " + ck + " --dataset train").code, 0);
  std::vector<char> bytes(3 * kCifarRecord, 7);
  bytes[0] = 0;
  bytes[kCifarRecord] = 1;
  bytes[2 * kCifarRecord] = 5;  // dropped: only two classes
  {
    std::ofstream os(dir / "tiny.bin", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  const CliResult r = run("eval --checkpoint " + ck + " --dataset " + (dir / "tiny.bin").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("samples=2"), std::string::npos) << r.out;
  EXPECT_EQ(run("eval --checkpoint " + ck + " --dataset " + (dir / "missing.bin").string()).code, 1);
}

TEST_F(Cli, BenchTableSchema) {
  const CliResult r = run("bench --shapes 16x8 --repeats 3 --warmups 1 --seed 4");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  const auto rows = read_bench_csv(in);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].variant, "dense");
  EXPECT_EQ(rows[1].variant, "sgc_g4");
  EXPECT_EQ(rows[2].variant, "dgc_xi0.75_h4");
  EXPECT_GT(rows[2].conv_ms, 0.0);
  EXPECT_NE(r.out.find("# seed=4"), std::string::npos);
  EXPECT_NE(r.out.find("saliency_ms,index_ms,conv_ms"), std::string::npos);
}

TEST_F(Cli, BenchSingleRepeatWarns) {
  const CliResult r = run("bench --shapes 16x4 --repeats 1 --warmups 0");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos) << r.err;
}

TEST_F(Cli, BenchOrderingViolationExitsThree) {
  // One group makes SGC a dense convolution, four times the work of DGC at 0.75.
  const CliResult r = run("bench --shapes 32x16 --repeats 9 --warmups 2 --groups 1 --assert-ordering");
  EXPECT_EQ(r.code, 3) << r.out << r.err;
  EXPECT_NE(r.err.find("ordering"), std::string::npos);
}

TEST_F(Cli, BenchIndivisibleShapeIsUsageError) {
  EXPECT_EQ(run("bench --shapes 6x4 --repeats 2").code, 1);
}

TEST_F(Cli, VisualizeEmitsParsableFiles) {
  const fs::path cfg = write_config("v.cfg");
  ASSERT_EQ(run("train --config " + cfg.string() + " --epochs 1 --out " + (dir / "run").string()).code, 0);
  const std::string ck = (dir / "run" / "checkpoint").string();
  const fs::path vis = dir / "vis";
  const CliResult r = run("visualize --checkpoint " + ck + " --images 3 --contributions --out " + vis.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (std::size_t layer : {1u, 2u}) {
    const std::string l = std::to_string(layer);
    for (int i = 0; i < 3; ++i) {
      const std::string suffix = "_l" + l + "_i" + std::to_string(i);
      const Matrix s = read_csv_matrix(vis / ("saliency" + suffix + ".csv"));
      ASSERT_EQ(s.size(), 2u);
      ASSERT_EQ(s[0].size(), 8u);
      const auto off = read_pgm(vis / ("decision" + suffix + ".pgm"));
      ASSERT_EQ(off.size(), 2u);
      for (const auto& row : off) EXPECT_EQ(std::count(row.begin(), row.end(), true), 4);
    }
    const Matrix p = read_csv_matrix(vis / ("deactivation_l" + l + ".csv"));
    for (const auto& row : p)
      for (double v : row) EXPECT_TRUE(v >= 0 && v <= 1);
    const Matrix c = read_csv_matrix(vis / ("contribution_l" + l + ".csv"));
    EXPECT_EQ(c.size(), layer == 1 ? 8u : 16u);
    EXPECT_EQ(c[0].size(), 8u);
  }
  const std::string rates = slurp(vis / "layer_prune_rates.csv");
  EXPECT_NE(rates.find("seed=5"), std::string::npos);
  EXPECT_NE(rates.find("1,0.5\n"), std::string::npos) << rates;
  EXPECT_NE(rates.find("2,0.5\n"), std::string::npos) << rates;
}

TEST_F(Cli, VisualizeRejectsUnknownLayer) {
  const fs::path cfg = write_config("v.cfg");
  ASSERT_EQ(run("train --config " + cfg.string() + " --epochs 1 --out " + (dir / "run").string()).code, 0);
  const CliResult r = run("visualize --checkpoint " + (dir / "run" / "checkpoint").string() + " --layers 0 --out " +
                    (dir / "vis").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("1, 2"), std::string::npos) << r.err;
}

TEST(Visualize, SingleImageProbabilitiesAreBinary) {
  TrainConfig c;
  c.layers = parse_topology("conv:8:3:2,dgc:8:3:1");
  c.heads = 2;
  c.squeeze = 4;
  c.train_count = 32;
  c.test_count = 8;
  c.batch_size = 16;
  c.epochs = 1;
  auto s = make_trainer<double>(c);
  const DataSplits d = load_splits(c);
  train_epoch(s, d.train);
  Dataset one = d.test;
  one.labels.resize(1);
  one.pixels.resize(one.sample_size());
  const auto b = visualize(s.net, one, GateSpec::head_wise(0.5), {}, false);
  ASSERT_EQ(b.layers.size(), 1u);
  for (const auto& row : b.layers[0].deactivation_probability)
    for (double v : row) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_EQ(b.layers[0].prune_rate, 0.5);
}

TEST(Visualize, TwoImagesThatDisagreeGiveOneHalf) {
  TrainConfig c;
  c.layers = parse_topology("conv:8:3:2,dgc:8:3:1");
  c.heads = 2;
  c.squeeze = 4;
  c.train_count = 32;
  c.test_count = 32;
  c.batch_size = 16;
  c.epochs = 1;
  auto s = make_trainer<double>(c);
  const DataSplits d = load_splits(c);
  train_epoch(s, d.train);
  const auto all = visualize(s.net, d.test, GateSpec::head_wise(0.5), {}, false).layers[0];
  // Find two images whose decisions differ in some head, then count directly.
  std::size_t a = 0, b = 0;
  bool found = false;
  for (std::size_t i = 0; i < 32 && !found; ++i)
    for (std::size_t j = i + 1; j < 32 && !found; ++j)
      if (all.deactivated[i] != all.deactivated[j]) {
        a = i;
        b = j;
        found = true;
      }
  ASSERT_TRUE(found);
  Dataset two = d.test;
  two.labels = {d.test.labels[a], d.test.labels[b]};
  two.pixels.clear();
  for (std::size_t i : {a, b}) two.pixels.insert(two.pixels.end(), d.test.image(i).begin(), d.test.image(i).end());
  const auto pair = visualize(s.net, two, GateSpec::head_wise(0.5), {}, false).layers[0];
  bool half = false;
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t ch = 0; ch < 8; ++ch) {
      const bool da = all.deactivated[a][h][ch];
      const bool db = all.deactivated[b][h][ch];
      const double expect = (da ? 0.5 : 0.0) + (db ? 0.5 : 0.0);
      EXPECT_EQ(pair.deactivation_probability[h][ch], expect) << "head " << h << " channel " << ch;
      half = half || expect == 0.5;
    }
  }
  EXPECT_TRUE(half);
}

TEST(Visualize, ContributionMatchesSingleFilterActivationMean) {
  TrainConfig c;
  c.layers = parse_topology("conv:4:3:2,dgc:4:3:1");
  c.heads = 2;
  c.squeeze = 2;
  c.train_count = 16;
  c.test_count = 4;
  c.batch_size = 16;
  c.epochs = 1;
  auto s = make_trainer<double>(c);
  const DataSplits d = load_splits(c);
  train_epoch(s, d.train);
  Dataset one = d.test;
  one.labels.resize(1);
  one.pixels.resize(one.sample_size());
  const auto vis = visualize(s.net, one, GateSpec::head_wise(0.5), {1}, true).layers[0];
  // Oracle: convolve each selected (amplified) input channel alone with the
  // matching filter slice and average the activation map.
  s.net.set_training(false);
  std::vector<std::size_t> idx{0};
  const auto pass = s.net.forward(make_batch<double>(one, idx).images, GateSpec::head_wise(0.5));
  s.net.set_training(true);
  const auto& blk = s.net.blocks[1];
  const Tensor<double>& x = blk.input;
  for (std::size_t h = 0; h < 2; ++h) {
    const auto& dec = pass.decisions[0][0][h];
    for (std::size_t slot = 0; slot < 2; ++slot) {
      const std::size_t out = slot * 2 + h;
      for (std::size_t ch = 0; ch < 4; ++ch) {
        const auto it = std::find(dec.indices.begin(), dec.indices.end(), ch);
        double want = 0;
        if (it != dec.indices.end()) {
          const double amp = dec.amplification[static_cast<std::size_t>(it - dec.indices.begin())];
          const std::size_t e = x.shape().h;
          double sum = 0;
          for (std::size_t y = 0; y < e; ++y)
            for (std::size_t xx = 0; xx < e; ++xx) {
              double acc = 0;
              for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) {
                  const long iy = static_cast<long>(y + i) - 1;
                  const long ix = static_cast<long>(xx + j) - 1;
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(e) || ix >= static_cast<long>(e)) continue;
                  acc += amp * x.at(0, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                         blk.dgc.heads[h].filters.at(slot, ch, i, j);
                }
              sum += acc;
            }
          want = sum / static_cast<double>(e * e);
        }
        EXPECT_NEAR(vis.contribution[out][ch], want, 1e-10) << "out " << out << " in " << ch;
      }
    }
  }
}
