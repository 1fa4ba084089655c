#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "plab/io.hpp"

namespace fs = std::filesystem;
using plab::cli::run;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("plab_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Gen, WritesHeaderPlusOneLinePerExample) {
  const auto dir = temp_dir("gen");
  const auto f = (dir / "d.txt").string();
  const auto r = cli({"gen", "--nb", "1000", "--k", "10", "--out", f});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(plab::read_file(f)), 10001u);
  EXPECT_NE(r.out.find("examples 10000"), std::string::npos);
  const auto one = cli({"gen", "--nb", "1", "--k", "1", "--out", "-"});
  ASSERT_EQ(one.code, 0);
  EXPECT_EQ(lines(one.out), 2u);
  fs::remove_all(dir);
}

TEST(Gen, SameSeedSameChecksum) {
  const auto a = cli({"gen", "--nb", "50", "--k", "4", "--seed", "9", "--out", "-"});
  const auto b = cli({"gen", "--nb", "50", "--k", "4", "--seed", "9", "--out", "-"});
  const auto c = cli({"gen", "--nb", "50", "--k", "4", "--seed", "10", "--out", "-"});
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out, c.out);
}

TEST(Gen, ResumeLeavesMatchingFileAlone) {
  const auto dir = temp_dir("resume");
  const auto f = (dir / "d.txt").string();
  ASSERT_EQ(cli({"gen", "--nb", "20", "--k", "3", "--out", f}).code, 0);
  const auto r = cli({"gen", "--nb", "20", "--k", "3", "--out", f, "--resume"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("unchanged"), std::string::npos);
  fs::remove_all(dir);
}

TEST(ExitCodes, UsageAndInfeasible) {
  EXPECT_EQ(cli({}).code, plab::cli::kUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, plab::cli::kUsage);
  EXPECT_EQ(cli({"gen", "--nb", "abc"}).code, plab::cli::kUsage);
  EXPECT_EQ(cli({"--help"}).code, plab::cli::kOk);
  // 36^2 selectors cannot fill a fiber of 2000.
  EXPECT_EQ(cli({"gen", "--nb", "10", "--k", "2000", "--out", "-"}).code, plab::cli::kInfeasible);
  EXPECT_EQ(cli({"probe", "tau"}).code, plab::cli::kUsage);
  EXPECT_EQ(cli({"probe", "tau", "--run", "/nonexistent/plab"}).code, plab::cli::kUsage);
}

TEST(ExitCodes, DivergedRunIsARunFailure) {
  const auto dir = temp_dir("diverge");
  const auto r = cli({"train", "--nb", "8", "--k", "2", "--layers", "1", "--d-model", "16", "--heads", "2", "--d-mlp",
                      "32", "--steps", "30", "--warmup", "1", "--lr", "1e8", "--run", (dir / "r").string(), "--quiet"});
  EXPECT_EQ(r.code, plab::cli::kRunFailure);
  fs::remove_all(dir);
}

TEST(TrainProbeReport, TinyRunEndToEnd) {
  const auto dir = temp_dir("train");
  const auto run_dir = (dir / "r").string();
  auto r = cli({"train", "--nb", "8", "--k", "2", "--layers", "1", "--d-model", "16", "--heads", "2", "--d-mlp", "32",
                "--steps", "40", "--warmup", "5", "--eval-every", "20", "--batch", "8", "--run", run_dir, "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(fs::path(run_dir) / "metrics.jsonl"));
  EXPECT_TRUE(plab::verify_manifest(run_dir).empty());
  // A finished run is not overwritten.
  r = cli({"train", "--nb", "8", "--k", "2", "--steps", "40", "--run", run_dir, "--quiet"});
  EXPECT_NE(r.code, 0);

  r = cli({"probe", "tau", "--run", run_dir});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(fs::path(run_dir) / "probes" / "tau.jsonl"));
  r = cli({"probe", "hessian", "--run", run_dir, "--step", "final", "--iters", "3", "--probe-batch", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("lambda_max"), std::string::npos);
  EXPECT_TRUE(plab::verify_manifest(run_dir).empty());

  r = cli({"report", "--run", run_dir});
  EXPECT_EQ(r.code, 0) << r.err;
  fs::remove_all(dir);
}
