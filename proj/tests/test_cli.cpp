#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include "mat/io.hpp"
#include "test_support.hpp"

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = "ANTICIPATE_LOG=error " + std::string(ANTICIPATE_BIN) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), int(buf.size()), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const char* kSmallConfig = R"({
  "world": {"videos": 12, "frames_per_video": 60},
  "model": {"dim": 16, "heads": 2, "fuser_layers": 1, "decoder_layers": 1, "contrast_dim": 8},
  "pretrain": {"epochs": 1, "warmup": 0, "batch": 8},
  "finetune": {"epochs": 1, "warmup": 0, "batch": 8},
  "corpus": {"max_train": 40, "max_eval": 20}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<mat_test::TempDir>(std::string("cli_") +
                                               ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::ofstream(dir_->file("small.json")) << kSmallConfig;
  }
  std::string f(const std::string& name) const { return dir_->file(name); }
  std::string cfg() const { return " --config " + f("small.json"); }
  std::unique_ptr<mat_test::TempDir> dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("gen-world").code, 1);
  EXPECT_EQ(run("finetune --corpus x --out y --mode partial").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, GenWorldIsDeterministic) {
  const auto a = run("gen-world" + cfg() + " --out " + f("a") + " --seed 5");
  const auto b = run("gen-world" + cfg() + " --out " + f("b") + " --seed 5");
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("segments="), std::string::npos);
  for (const auto* name : {"world.json", "annotations.csv", "descriptions.json", "vocab.csv", "splits.csv"}) {
    EXPECT_EQ(mat::detail::read_file(f("a") + "/" + name), mat::detail::read_file(f("b") + "/" + name)) << name;
  }
}

TEST_F(Cli, DataAndConfigErrorsExitTwo) {
  EXPECT_EQ(run("pretrain --corpus " + f("missing") + " --out " + f("m.ckpt")).code, 2);
  std::ofstream(f("bad.json")) << R"({"pretrain": {"epochz": 3}})";
  EXPECT_EQ(run("gen-world --config " + f("bad.json") + " --out " + f("c")).code, 2);
  const auto r = run("gen-world" + cfg() + " --out " + f("c"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(run("eval --corpus " + f("c") + " --checkpoint " + f("none.ckpt") + " --report " + f("r.json")).code, 2);
}

TEST_F(Cli, TrainEvalPipelineIsReproducible) {
  ASSERT_EQ(run("gen-world" + cfg() + " --out " + f("c")).code, 0);
  const auto c = " --corpus " + f("c") + cfg();
  auto r = run("pretrain" + c + " --out " + f("pre.ckpt"));
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("finetune" + c + " --checkpoint " + f("pre.ckpt") + " --mode full --out " + f("ft.ckpt"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(run("finetune" + c + " --out " + f("x.ckpt")).code, 1);
  ASSERT_EQ(run("eval" + c + " --checkpoint " + f("ft.ckpt") + " --report " + f("r1.json")).code, 0);
  ASSERT_EQ(run("eval" + c + " --checkpoint " + f("ft.ckpt") + " --report " + f("r2.json")).code, 0);
  EXPECT_EQ(mat::detail::read_file(f("r1.json")), mat::detail::read_file(f("r2.json")));
  EXPECT_EQ(mat::detail::read_file(f("r1.csv")), mat::detail::read_file(f("r2.csv")));
  const auto log = mat::detail::read_file(f("ft.ckpt.runlog.csv"));
  EXPECT_EQ(log.rfind("epoch,lr,", 0), 0u);

  r = run("eval" + c + " --checkpoint " + f("ft.ckpt") + " --modalities rgb --report " + f("rgb.json"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(run("eval" + c + " --checkpoint " + f("ft.ckpt") + " --modalities sonar --report " + f("s.json")).code, 2);

  r = run("sweep-actions" + c + " --checkpoint " + f("ft.ckpt") + " --p-list 0,1 --out " + f("sweep.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto sweep = mat::detail::read_file(f("sweep.csv"));
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 3);
  EXPECT_EQ(run("sweep-actions" + c + " --checkpoint " + f("ft.ckpt") + " --p-list 0,x --out " + f("s.csv")).code, 1);

  r = run("ablate-modalities" + c + " --mask-only --checkpoint " + f("ft.ckpt") + " --sets \"rgb;rgb,act_text\" --out " +
          f("abl.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto abl = mat::detail::read_file(f("abl.csv"));
  EXPECT_NE(abl.find("\nrgb+act_text,"), std::string::npos) << abl;
}

TEST_F(Cli, NumericFailureExitsThree) {
  ASSERT_EQ(run("gen-world" + cfg() + " --out " + f("c")).code, 0);
  std::ofstream(f("hot.json")) << R"({
    "world": {"videos": 12, "frames_per_video": 60},
    "model": {"dim": 16, "heads": 2, "fuser_layers": 1, "decoder_layers": 1, "contrast_dim": 8},
    "finetune": {"epochs": 1, "warmup": 0, "base_lr": 1e38, "clip_norm": 0, "momentum": 0},
    "corpus": {"max_train": 40, "max_eval": 20}})";
  const auto r = run("finetune --corpus " + f("c") + " --config " + f("hot.json") + " --from-scratch --out " +
                     f("hot.ckpt"));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_TRUE(std::filesystem::exists(f("hot.ckpt")));
}

TEST_F(Cli, GradcheckAndInjectedFault) {
  auto r = run("gradcheck --scope objectives");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("gradcheck passed"), std::string::npos);
  r = run("gradcheck --scope tensor_engine --inject-fault softmax");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("FAIL "), std::string::npos);
}

TEST_F(Cli, BadLogLevelIsConfigError) {
  const std::string cmd = "ANTICIPATE_LOG=loud " + std::string(ANTICIPATE_BIN) + " gradcheck --scope objectives >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 2);
}
