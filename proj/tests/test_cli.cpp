#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "sef_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(SEF_CLI_PATH) + " " + args + " > " + (work() / "last.log").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

const std::string kTiny =
    "--set resolution=32 --set embed_dim=16 --set num_heads=2 --set num_blocks=2 --set mlp_hidden=32 "
    "--set stage1_iters=2 --set stage1_batch=4 --set grad_accum=1 --set stage2_iters=2 --set stage2_batch=6 "
    "--set gate_hidden=8 --set unfreeze_k=1";

// Small train and test sets shared by the tests below.
const fs::path& train_data() {
  static const fs::path d = [] {
    const auto p = work() / "train40";
    EXPECT_EQ(run("gen-data --n 12 --size 40 --seed 0 --out " + p.string()), 0);
    return p;
  }();
  return d;
}

}  // namespace

TEST(Cli, GenDataWritesManifestAndSnapshot) {
  const auto out = work() / "gen";
  ASSERT_EQ(run("gen-data --n 100 --size 64 --seed 7 --out " + out.string()), 0) << slurp(work() / "last.log");
  EXPECT_EQ(lines(out / "manifest.jsonl"), 100u);
  EXPECT_TRUE(fs::exists(out / "config.txt"));
  EXPECT_TRUE(fs::exists(out / "run.json"));
  EXPECT_NE(slurp(out / "config.txt").find("seed=7"), std::string::npos);
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto root = work() / "envroot";
  const std::string cmd = "SEF_OUTPUT_ROOT=" + root.string() + " " + SEF_CLI_PATH +
                          " gen-data --n 3 --size 32 --seed 1 > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(lines(root / "gen-data" / "manifest.jsonl"), 3u);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run("gen-data --bogus-flag"), 1);
  EXPECT_EQ(run("no-such-command"), 1);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("gen-data --n 2 --size 32 --set lr=abc --out " + (work() / "x").string()), 1);
  EXPECT_EQ(run("gen-data --n 2 --size 32 --set nokey=1 --out " + (work() / "x").string()), 1);
  EXPECT_EQ(run("gen-data --n 2 --size 36 --out " + (work() / "x").string()), 1);
  EXPECT_EQ(run("train-expert --domain vae --data /nonexistent/data --out " + (work() / "x").string()), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, MetricsOnGeneratedSet) {
  const auto d = train_data();
  const auto out = work() / "metrics";
  ASSERT_EQ(run("metrics --real " + (d / "real").string() + " --vae " + (d / "fake_vae").string() + " --gan " +
                (d / "fake_gan").string() + " --out " + out.string()),
            0)
      << slurp(work() / "last.log");
  EXPECT_EQ(lines(out / "metrics.jsonl"), 8u);
}

TEST(Cli, ConfigSnapshotReproducesRun) {
  const auto d = train_data();
  const auto a = work() / "runA", b = work() / "runB";
  ASSERT_EQ(run("train-expert --domain gan --seed 5 " + kTiny + " --data " + d.string() + " --out " + a.string()), 0)
      << slurp(work() / "last.log");
  ASSERT_EQ(run("train-expert --domain gan --config " + (a / "config.txt").string() + " --data " + d.string() +
                " --out " + b.string()),
            0)
      << slurp(work() / "last.log");
  EXPECT_EQ(slurp(a / "gan.ckpt"), slurp(b / "gan.ckpt"));
  EXPECT_EQ(slurp(a / "train_log.jsonl"), slurp(b / "train_log.jsonl"));
  EXPECT_EQ(slurp(a / "config.txt"), slurp(b / "config.txt"));
}

TEST(Cli, TrainFuseEvaluate) {
  const auto d = train_data();
  const auto v = work() / "ev", s = work() / "es", f = work() / "sef", test = work() / "test40";
  const std::string common = " --seed 1 " + kTiny + " --data " + d.string();
  ASSERT_EQ(run("train-expert --domain vae" + common + " --out " + v.string()), 0) << slurp(work() / "last.log");
  ASSERT_EQ(run("train-expert --domain gan" + common + " --out " + s.string()), 0);
  ASSERT_EQ(run("train-sef --vae " + (v / "vae.ckpt").string() + " --gan " + (s / "gan.ckpt").string() + common +
                " --out " + f.string()),
            0)
      << slurp(work() / "last.log");
  // Experts in the wrong slots are refused.
  EXPECT_EQ(run("train-sef --vae " + (s / "gan.ckpt").string() + " --gan " + (v / "vae.ckpt").string() + common +
                " --out " + (work() / "x").string()),
            1);
  ASSERT_EQ(run("gen-data --split test --n 10 --size 40 --out " + test.string()), 0);
  const auto e = work() / "eval";
  ASSERT_EQ(run("evaluate --ckpt " + (f / "sef.ckpt").string() + " --data " + test.string() +
                " --perturb all --out " + e.string()),
            0)
      << slurp(work() / "last.log");
  EXPECT_EQ(lines(e / "eval.jsonl"), 1u);
  // Evaluating on the training seeds is a configuration error.
  EXPECT_EQ(run("evaluate --ckpt " + (v / "vae.ckpt").string() + " --data " + d.string() + " --out " +
                (work() / "x").string()),
            1);
}
