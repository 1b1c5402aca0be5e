#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rsd/config.hpp"
#include "rsd/experiment.hpp"
#include "rsd/rng.hpp"

namespace rsd {
namespace {

TEST(Rng, StreamsArePureFunctionsOfKey) {
  const Rng root(42);
  Rng a = root.stream(stream_tag::kData, 7), b = root.stream(stream_tag::kData, 7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  std::set<std::uint64_t> firsts;
  for (std::uint64_t tag = 1; tag <= 9; ++tag) {
    for (std::uint64_t i = 0; i < 50; ++i) firsts.insert(root.stream(tag, i).next_u64());
  }
  EXPECT_EQ(firsts.size(), 450u);
  EXPECT_NE(Rng(1).next_u64(), Rng(2).next_u64());
}

TEST(Rng, NormalMoments) {
  Rng rng(3);
  const int n = 200000;
  double s = 0, s2 = 0, s4 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
    s4 += z * z * z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
  EXPECT_NEAR(s4 / n, 3.0, 0.1);
}

TEST(Rng, UniformAndBelowRanges) {
  Rng rng(4);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_GT(rng.uniform_open_low(), 0.0);
    ++counts[rng.below(7)];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(ConfigFile, ParsesSectionsAndTypes) {
  const auto f = ConfigFile::parse(
      "# comment\n[a]\nx = 1.5\nn = 3\nlist = 1, 2, 3\nflag = true\nname = hello world\n\n[b]\ny=2\n");
  const auto& a = f.section("a");
  EXPECT_EQ(a.get_double("x"), 1.5);
  EXPECT_EQ(a.get_int("n"), 3);
  EXPECT_EQ(a.get_ints("list"), (std::vector<std::int64_t>{1, 2, 3}));
  EXPECT_TRUE(a.get_bool("flag", false));
  EXPECT_EQ(a.get_string("name"), "hello world");
  EXPECT_EQ(a.get_double("missing", 7.0), 7.0);
  EXPECT_EQ(f.section("b").get_int("y"), 2);
  EXPECT_FALSE(f.has("c"));
  const auto again = ConfigFile::parse(f.to_string());
  EXPECT_EQ(again.to_string(), f.to_string());
}

std::string error_of(const std::string& text) {
  try {
    ExperimentConfig::from_file(ConfigFile::parse(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

TEST(ConfigFile, DiagnosticsCarryLineNumbers) {
  EXPECT_NE(error_of("[experiment]\ntask = synthetic\nseed = -1\n").find("line 3"), std::string::npos);
  EXPECT_NE(error_of("[noise]\nsigma = 0.1\nbogus = 2\n").find("line 3"), std::string::npos);
  EXPECT_NE(error_of("[nosuch]\n").find("line 1"), std::string::npos);
  EXPECT_NE(error_of("[pretrain]\nlr = abc\n").find("line 2"), std::string::npos);
  EXPECT_NE(error_of("[data]\ndim = 8\nrank = 8\n").find("rank"), std::string::npos);
  EXPECT_THROW(ConfigFile::parse("key = 1\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[a]\nno equals sign\n"), ConfigError);
}

TEST(ExperimentConfig, Defaults) {
  const auto c = ExperimentConfig::from_file(ConfigFile::parse("[experiment]\ntask = synthetic\nseed = 5\n"));
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.op.kind, OperatorKind::kDense);
  EXPECT_EQ(c.op.dim, c.data.dim);
  EXPECT_EQ(c.pretrain.steps, 2000);
  EXPECT_NE(c.plan("pretrain").find("synthetic"), std::string::npos);
}

TEST(ExperimentConfig, CrossChecks) {
  EXPECT_FALSE(error_of("[pretrain]\nobjective = ambient_inpaint\n").empty());
  EXPECT_FALSE(error_of("[data]\nsource = file\n").empty());
  EXPECT_TRUE(error_of("[data]\ndim = 6\n[operator]\nkind = random_mask\ndim = 6\nmissing_rate = 0.2\n"
                       "[pretrain]\nobjective = ambient_inpaint\n")
                  .empty());
}

}  // namespace
}  // namespace rsd
