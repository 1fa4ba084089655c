#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "plab/io.hpp"
#include "plab/nn.hpp"

using namespace plab;
namespace fs = std::filesystem;

TEST(Fnv, KnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(Metrics, JsonLineRoundTrip) {
  MetricsRecord m{1250, 2.5, 2.25, 2.25, 0.125, 3.5, 1e-3, 160000};
  const std::string line = metrics_to_json_line(m);
  EXPECT_NE(line.find("\"tokens_processed\""), std::string::npos);
  EXPECT_EQ(metrics_from_json_line(line), m);
}

TEST(Manifest, DetectsTampering) {
  const fs::path dir = fs::temp_directory_path() / ("plab_manifest_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  write_file_atomic(dir / "a.txt", "hello\n");
  write_file_atomic(dir / "sub" / "b.txt", "world\n");
  write_manifest(dir);
  EXPECT_TRUE(verify_manifest(dir).empty());
  {
    std::ofstream os(dir / "a.txt", std::ios::app);
    os << "x";
  }
  EXPECT_FALSE(verify_manifest(dir).empty());
  fs::remove_all(dir);
}

TEST(Checkpoint, FileRoundTrip) {
  ArchDescriptor a;
  a.family = Family::rnn;
  a.d_model = 12;
  const ModelState m = init(a, 3);
  const fs::path p = fs::temp_directory_path() / ("plab_ckpt_" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint(p, m);
  const ModelState back = load_checkpoint(p);
  EXPECT_EQ(back.arch, a);
  EXPECT_EQ(back.params, m.params);
  fs::remove(p);
  EXPECT_THROW(load_checkpoint(p), std::runtime_error);
}
