// Copyright 2026 The dustlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dustlab/image_io.hpp"
#include "dustlab/objectives.hpp"

namespace dustlab {
namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dustlab_cli_" + std::to_string(::getpid()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  // Runs the CLI with `args`; stdout lands in out_, the exit status is returned.
  int run(const std::string& args, const std::string& env = "") {
    const std::string capture = path("stdout.txt");
    const std::string cmd = env + " '" DUSTLAB_CLI "' " + args + " > '" + capture + "' 2> '" + path("stderr.txt") + "'";
    const int status = std::system(cmd.c_str());
    out_ = slurp(capture);
    err_ = slurp(path("stderr.txt"));
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  // Every regular file under `root`, keyed by relative path.
  static std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path().string());
    return files;
  }

  fs::path dir_;
  std::string out_, err_;
};

TEST_F(Cli, SynthEmptyCountWritesHeaderOnly) {
  ASSERT_EQ(run("synth --out " + path("s") + " --count 0"), 0) << err_;
  const auto sidecar = slurp(path("s/provenance.txt"));
  EXPECT_EQ(sidecar.substr(0, 2), "# ");
  for (std::size_t pos = 0; (pos = sidecar.find('\n', pos)) != std::string::npos; ++pos)
    if (pos + 1 < sidecar.size()) EXPECT_EQ(sidecar[pos + 1], '#');
  EXPECT_TRUE(fs::is_empty(path("s/clean")));
}

TEST_F(Cli, SynthIsDeterministicAndZeroBetaIsIdentity) {
  ASSERT_EQ(run("--threads 1 synth --out " + path("a") + " --count 3 --seed 9"), 0) << err_;
  ASSERT_EQ(run("--threads 1 synth --out " + path("b") + " --count 3 --seed 9"), 0) << err_;
  EXPECT_EQ(tree(path("a")), tree(path("b")));
  ASSERT_EQ(run("synth --out " + path("c") + " --count 3 --seed 10"), 0);
  EXPECT_NE(tree(path("a")), tree(path("c")));
  ASSERT_EQ(run("synth --out " + path("z") + " --count 3 --beta-min 0 --beta-max 0"), 0) << err_;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "sample_0000" + std::to_string(i) + ".png";
    EXPECT_EQ(slurp(path("z/clean/" + name)), slurp(path("z/dusty/" + name)));
  }
}

TEST_F(Cli, SynthFromCleanDirectory) {
  fs::create_directories(path("photos"));
  write_image(Tensor<float>({1, 3, 40, 48}, 0.25f), path("photos/a.png"));
  ASSERT_EQ(run("synth --clean-dir " + path("photos") + " --out " + path("o") + " --count 2 --patch 32"), 0) << err_;
  EXPECT_EQ(read_image<float>(path("o/clean/sample_00001.png")).shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(run("synth --clean-dir " + path("photos") + " --out " + path("o2") + " --patch 64"), 2);
  EXPECT_EQ(run("synth --clean-dir " + path("missing") + " --out " + path("o3")), 1);
}

TEST_F(Cli, UsageErrorsNameTheFlagAndTouchNothing) {
  EXPECT_EQ(run("synth --out " + path("u1") + " --beta-min 2 --beta-max 1"), 1);
  EXPECT_NE(err_.find("--beta-max"), std::string::npos) << err_;
  EXPECT_EQ(run("synth --out " + path("u2") + " --ambient 1,2"), 1);
  EXPECT_NE(err_.find("--ambient"), std::string::npos) << err_;
  EXPECT_EQ(run("synth --out " + path("u3") + " --frobnicate"), 1);
  EXPECT_NE(err_.find("--frobnicate"), std::string::npos) << err_;
  EXPECT_EQ(run("train --out " + path("u4") + " --set nonsense=1"), 1);
  EXPECT_NE(err_.find("nonsense"), std::string::npos) << err_;
  EXPECT_EQ(run("info --resolution 100"), 1);
  EXPECT_EQ(run("gradcheck --module nope"), 1);
  EXPECT_EQ(run(""), 1);
  for (const char* d : {"u1", "u2", "u3", "u4"}) EXPECT_FALSE(fs::exists(path(d))) << d;
  EXPECT_EQ(run("info", "DUSTLAB_THREADS=zero"), 1);
  EXPECT_EQ(run("info --config tiny", "DUSTLAB_THREADS=1"), 0);
}

TEST_F(Cli, InfoReportsAccountingAgainstTargets) {
  ASSERT_EQ(run("info --config table2 --resolution 256x256"), 0) << err_;
  const auto value = [&](const std::string& key) {
    const auto at = out_.find("\n" + key + "=");
    EXPECT_NE(at, std::string::npos) << key;
    const auto start = at + key.size() + 2;
    return out_.substr(start, out_.find('\n', start) - start);
  };
  const double params = std::stod(value("params"));
  EXPECT_NEAR(params / 1.866e6, 1.0, 0.2);
  EXPECT_EQ(value("target_params"), "1866000");
  EXPECT_NE(value("flop_convention").find("multiply-add"), std::string::npos);
  EXPECT_NE(value("flops_deviation").find('%'), std::string::npos);
  ASSERT_EQ(run("info --config tiny"), 0);
  EXPECT_LT(std::stod(value("params")), params);
}

TEST_F(Cli, InferWithIdentityModelKeepsImage) {
  ASSERT_EQ(run("train --config default --out " + path("m") + " --set steps=0 --set eval_count=1 --quiet"), 0) << err_;
  Rng rng(3);
  Tensor<float> img({1, 3, 70, 50});
  for (auto& v : img.mutable_data()) v = static_cast<float>(rng.uniform());
  write_image(img, path("in.png"));
  ASSERT_EQ(run("infer --ckpt " + path("m/last.ckpt") + " --in " + path("in.png") + " --out " + path("out.ppm")), 0)
      << err_;
  const auto a = read_image8(path("in.png")), b = read_image8(path("out.ppm"));
  EXPECT_EQ(b.height, 70);
  EXPECT_EQ(b.width, 50);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(run("infer --ckpt " + path("m/last.ckpt") + " --in " + path("in.png") + " --out " + path("o.gif")), 1);
  EXPECT_EQ(run("infer --ckpt " + path("in.png") + " --in " + path("in.png") + " --out " + path("o.png")), 2);
}

TEST_F(Cli, EvalIdenticalPairsGivesInfinitePsnr) {
  fs::create_directories(path("p/clean"));
  fs::create_directories(path("p/dusty"));
  Tensor<float> img({1, 3, 24, 24});
  Rng rng(4);
  for (auto& v : img.mutable_data()) v = static_cast<float>(rng.uniform());
  write_image(img, path("p/clean/x.png"));
  write_image(img, path("p/dusty/x.png"));
  ASSERT_EQ(run("train --config tiny --out " + path("m") + " --set steps=0 --set eval_count=1 --quiet"), 0) << err_;
  ASSERT_EQ(run("eval --ckpt " + path("m/last.ckpt") + " --pairs " + path("p")), 0) << err_;
  EXPECT_NE(out_.find("image file=x.png psnr_db=inf ssim=1.000000"), std::string::npos) << out_;
  ASSERT_EQ(run("eval --baseline --pairs " + path("p") + " --format tsv"), 0) << err_;
  EXPECT_EQ(out_, "file\tpsnr_db\tssim\tentropy_bits\nx.png\tinf\t1.000000\t" +
                      format_metric(entropy(quantize_like_io(img))) + "\n");
  EXPECT_EQ(run("eval --pairs " + path("p")), 1);
}

TEST_F(Cli, TrainRerunIsByteIdenticalAndEvalMatchesLog) {
  const std::string flags = " --config tiny --seed 3 --set steps=4 --set eval_every=2 --quiet";
  ASSERT_EQ(run("--threads 1 train --out " + path("r1") + flags), 0) << err_;
  ASSERT_EQ(run("--threads 1 train --out " + path("r2") + flags), 0) << err_;
  EXPECT_EQ(tree(path("r1")), tree(path("r2")));
  const auto log = slurp(path("r1/run.log"));
  ASSERT_EQ(run("eval --ckpt " + path("r1/best.ckpt") + " --pairs " + path("r1/holdout")), 0) << err_;
  const auto mean_at = out_.find("mean_psnr_db=");
  ASSERT_NE(mean_at, std::string::npos);
  const double reloaded = std::stod(out_.substr(mean_at + 13));
  double best = -1e9;
  for (std::size_t at = 0; (at = log.find("eval step=", at)) != std::string::npos; ++at)
    best = std::max(best, std::stod(log.substr(log.find("psnr=", at) + 5)));
  EXPECT_NEAR(reloaded, best, 1e-5);
}

TEST_F(Cli, DivergentTrainingExitsNumeric) {
  EXPECT_EQ(run("train --config tiny --out " + path("n") + " --set lr=1e38 --set clip_norm=0 --set steps=20 --quiet"), 3)
      << out_ << err_;
  EXPECT_TRUE(fs::exists(path("n/nan_batch.txt")));
}

TEST_F(Cli, TrainOnPairDirectory) {
  ASSERT_EQ(run("synth --out " + path("d") + " --count 6 --patch 32"), 0);
  ASSERT_EQ(run("train --config tiny --data " + path("d") + " --out " + path("m") + " --set steps=2 --set holdout=2 --quiet"), 0)
      << err_;
  EXPECT_EQ(tree(path("m/holdout/clean")).size(), 2u);
  EXPECT_EQ(slurp(path("m/holdout/dusty/sample_00000.png")), slurp(path("d/dusty/sample_00000.png")));
}

TEST_F(Cli, GradcheckSuitePasses) {
  ASSERT_EQ(run("gradcheck --module synth"), 0) << out_;
  EXPECT_NE(out_.find("suite=synth"), std::string::npos);
  EXPECT_NE(out_.find("status=ok"), std::string::npos);
}

TEST_F(Cli, AblateWritesTable) {
  ASSERT_EQ(run("ablate --config tiny --set steps=1 --set eval_count=1 --toggles cifm --seeds 4 --out " + path("t.tsv")), 0)
      << err_;
  const auto table = slurp(path("t.tsv"));
  EXPECT_EQ(table.substr(0, table.find('\n')), "variant\tseed\tparams\tpsnr_db\tssim");
  EXPECT_NE(table.find("\n-cifm\t4\t"), std::string::npos) << table;
  EXPECT_EQ(run("ablate --config tiny --toggles wings"), 1);
}

}  // namespace
}  // namespace dustlab
