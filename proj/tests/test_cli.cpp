// End-to-end checks of the ttdg binary through the shell.

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "test_util.hpp"

using namespace ttdg;
namespace fs = std::filesystem;

namespace {

constexpr const char* kTinyConfig = R"({
  "model": {"image_size": 8, "hidden_channels": 4, "feature_channels": 6,
            "head_channels": 4, "n_bases": 4},
  "optimizer": {"epochs": 2, "batch_size": 8},
  "data": {"n_per_class": 8},
  "experiment": {"seeds": [7]}
})";

struct Result {
  int code = -1;
  std::string out;
};

/// Runs the binary with `args`, capturing stdout and stderr together.
Result run(const std::string& args, const fs::path& dir) {
  const auto log = dir / "cmd.log";
  const std::string cmd = std::string(TTDG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testkit::read_text(log);
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = testkit::scratch_dir("cli");
    std::ofstream(root_ / "tiny.json") << kTinyConfig;
    ASSERT_EQ(run("generate --config " + cfg() + " --out " + data(), root_).code, 0);
    const auto r = run("train --config " + cfg() + " --data " + data() + " --out " +
                           (root_ / "train").string(),
                       root_);
    ASSERT_EQ(r.code, 0) << r.out;
    train_log_ = r.out;
  }

  static std::string cfg() { return (root_ / "tiny.json").string(); }
  static std::string data() { return (root_ / "data").string(); }
  static std::string ckpt() { return (root_ / "train" / "checkpoint.ttdg").string(); }

  static fs::path root_;
  static std::string train_log_;
};

fs::path Cli::root_;
std::string Cli::train_log_;

}  // namespace

TEST_F(Cli, GenerateWritesDomainsAndManifest) {
  for (const char* f : {"domain_0.ttdgdata", "domain_1.ttdgdata", "domain_2.ttdgdata",
                        "domain_3.ttdgdata", "manifest.csv", "config.snapshot"}) {
    EXPECT_TRUE(fs::exists(fs::path(data()) / f)) << f;
  }
  const auto again = root_ / "data2";
  const auto r1 = run("generate --config " + cfg() + " --out " + data(), root_);
  const auto r2 = run("generate --config " + cfg() + " --out " + again.string(), root_);
  EXPECT_EQ(r1.out, r2.out);
  EXPECT_NE(r1.out.find("fnv1a"), std::string::npos);
  EXPECT_EQ(io::read_file(fs::path(data()) / "domain_2.ttdgdata"),
            io::read_file(again / "domain_2.ttdgdata"));
  const auto r3 = run("generate --config " + cfg() + " --seed 99 --out " + again.string(), root_);
  EXPECT_NE(r1.out, r3.out);
}

TEST_F(Cli, GenerateIntoUnwritablePathLeavesNothing) {
  std::ofstream(root_ / "blocker") << "x";
  const auto target = root_ / "blocker" / "sub";
  const auto r = run("generate --config " + cfg() + " --out " + target.string(), root_);
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_FALSE(fs::exists(target));
}

TEST_F(Cli, TrainReportsLossesAndArtifacts) {
  EXPECT_NE(train_log_.find("epoch 1  total"), std::string::npos);
  EXPECT_NE(train_log_.find("epoch 2  total"), std::string::npos);
  EXPECT_NE(train_log_.find("dsss invocations"), std::string::npos);
  EXPECT_EQ(train_log_.find("dsss invocations 0"), std::string::npos);
  for (const char* f : {"checkpoint.ttdg", "bank.ttdg", "loss_log.csv", "config.snapshot"}) {
    EXPECT_TRUE(fs::exists(root_ / "train" / f)) << f;
  }
}

TEST_F(Cli, ZeroContentWeightSkipsReassembly) {
  const auto r = run("train --config " + cfg() + " --arm style-loss-only --data " + data() +
                         " --out " + (root_ / "no_con").string(),
                     root_);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("dsss invocations 0"), std::string::npos) << r.out;
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  // One epoch, then resume to two, against the two-epoch run from setup.
  std::ofstream(root_ / "one.json") << R"({
    "model": {"image_size": 8, "hidden_channels": 4, "feature_channels": 6,
              "head_channels": 4, "n_bases": 4},
    "optimizer": {"epochs": 1, "batch_size": 8},
    "data": {"n_per_class": 8},
    "experiment": {"seeds": [7]}
  })";
  const auto part = root_ / "part";
  ASSERT_EQ(run("train --config " + (root_ / "one.json").string() + " --data " + data() +
                    " --out " + part.string(),
                root_)
                .code,
            0);
  const auto resumed = root_ / "resumed";
  const auto r = run("train --config " + cfg() + " --data " + data() + " --out " +
                         resumed.string() + " --resume " + (part / "checkpoint.ttdg").string(),
                     root_);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("epoch 1 "), std::string::npos);
  EXPECT_NE(r.out.find("epoch 2 "), std::string::npos);
  EXPECT_EQ(io::read_file(resumed / "bank.ttdg"), io::read_file(root_ / "train" / "bank.ttdg"));

  const auto clash = run("train --config " + cfg() + " --data " + data() + " --out " +
                             (root_ / "clash").string() + " --seed 8 --resume " +
                             (part / "checkpoint.ttdg").string(),
                         root_);
  EXPECT_EQ(clash.code, 2);
}

TEST_F(Cli, EvalIsRepeatableAndLeavesCheckpointAlone) {
  const auto before = io::read_file(ckpt());
  const auto a = run("eval --checkpoint " + ckpt() + " --data " + data() + " --out " +
                         (root_ / "eval_a").string(),
                     root_);
  const auto b = run("eval --checkpoint " + ckpt() + " --data " + data() + " --out " +
                         (root_ / "eval_b").string(),
                     root_);
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(io::read_file(root_ / "eval_a" / "metrics.csv"),
            io::read_file(root_ / "eval_b" / "metrics.csv"));
  EXPECT_EQ(io::read_file(ckpt()), before);
  const auto report = testkit::read_text(root_ / "eval_a" / "report.txt");
  for (const char* key : {"HTER", "AUC", "EER threshold"}) {
    EXPECT_NE(report.find(key), std::string::npos) << key;
  }
  EXPECT_EQ(testkit::read_text(root_ / "eval_a" / "metrics.csv").substr(0, 8), "hter,auc");
}

TEST_F(Cli, ProjectReportsNormalizedOrderedWeights) {
  const auto before = io::read_file(ckpt());
  const auto r = run("project --checkpoint " + ckpt() + " --sample-file " + data() +
                         "/domain_3.ttdgdata --index 2 --out " + (root_ / "proj").string(),
                     root_);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(io::read_file(ckpt()), before);
  EXPECT_NE(r.out.find("sum w_n = 1.000000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("live probability"), std::string::npos);

  std::istringstream in(r.out);
  std::vector<std::pair<double, double>> rows;
  bool in_table = false;
  for (std::string line; std::getline(in, line);) {
    if (line == "basis  d_n  w_n") {
      in_table = true;
      continue;
    }
    if (in_table && line.rfind("sum", 0) == 0) break;
    if (in_table) {
      std::istringstream ls(line);
      std::size_t n;
      double d, w;
      ls >> n >> d >> w;
      rows.emplace_back(d, w);
    }
  }
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& a : rows) {
    for (const auto& b : rows) {
      if (a.first > b.first + 1e-6) {
        EXPECT_GE(a.second, b.second);
      }
    }
  }

  const auto bad = run("project --checkpoint " + ckpt() + " --sample-file " + data() +
                           "/domain_3.ttdgdata --index 9999 --out " + (root_ / "proj2").string(),
                       root_);
  EXPECT_EQ(bad.code, 3);
}

TEST_F(Cli, ExportFeaturesWritesBothFiles) {
  const auto out = root_ / "feats";
  const auto r = run("export-features --checkpoint " + ckpt() + " --data " + data() +
                         " --domain 3 --out " + out.string(),
                     root_);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto pre = testkit::read_text(out / "features_pre.csv");
  const auto post = testkit::read_text(out / "features_post.csv");
  EXPECT_EQ(std::count(pre.begin(), pre.end(), '\n'), 17);
  EXPECT_EQ(std::count(post.begin(), post.end(), '\n'), 17);
  EXPECT_NE(pre, post);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("generate --config " + (root_ / "missing.json").string() + " --out x", root_).code,
            2);
  std::ofstream(root_ / "bogus.json") << R"({"model": {"bogus": 1}})";
  const auto unknown =
      run("generate --config " + (root_ / "bogus.json").string() + " --out " +
              (root_ / "never").string(),
          root_);
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("unknown key 'bogus'"), std::string::npos);
  EXPECT_EQ(run("frobnicate", root_).code, 2);
  EXPECT_EQ(run("--help", root_).code, 0);
  EXPECT_EQ(run("eval --checkpoint " + (root_ / "none.ttdg").string() + " --data " + data() +
                    " --out " + (root_ / "e").string(),
                root_)
                .code,
            3);

  std::ofstream(root_ / "diverge.json") << R"({
    "model": {"image_size": 8, "hidden_channels": 4, "feature_channels": 6,
              "head_channels": 4, "n_bases": 4},
    "optimizer": {"epochs": 3, "batch_size": 8, "learning_rate": 1e300},
    "data": {"n_per_class": 8}
  })";
  const auto diverge = run("train --config " + (root_ / "diverge.json").string() + " --data " +
                               data() + " --out " + (root_ / "div").string(),
                           root_);
  EXPECT_EQ(diverge.code, 4) << diverge.out;
  EXPECT_FALSE(fs::exists(root_ / "div" / "checkpoint.ttdg"));
}

TEST_F(Cli, AblationWritesRunTree) {
  const auto out = root_ / "abl";
  const auto r = run("run-ablation --config " + cfg() + " --arms baseline ttsp-dsss --out " +
                         out.string(),
                     root_);
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* arm : {"baseline", "ttsp-dsss"}) {
    for (const char* f : {"metrics.csv", "bank.ttdg", "checkpoint.ttdg", "features_pre.csv",
                          "features_post.csv", "config.snapshot"}) {
      EXPECT_TRUE(fs::exists(out / "runs" / arm / "7" / f)) << arm << "/" << f;
    }
  }
  EXPECT_TRUE(fs::exists(out / "ablation_summary.csv"));
  EXPECT_NE(r.out.find("per-seed HTER"), std::string::npos);
}
