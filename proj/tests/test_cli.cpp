// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mergebench/cli.hpp"
#include "merge_fixture.hpp"
#include "support.hpp"

using namespace mergebench;
using testing_support::file_bytes;
using testing_support::MergeFixture;
using testing_support::TempDir;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "mergebench");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream(p) << j.dump(2);
}

std::vector<std::string> small_bench_flags() {
  return {"bench", "--domains", "3", "--tasks", "3", "--methods", "average,task_arithmetic,dare", "--sweep",
          "--scaling", "--m-max", "2", "--repeats", "2"};
}

}  // namespace

TEST(Cli, CostPrintsOneRow) {
  const auto r = invoke({"cost", "--method", "average", "--d", "3", "--k", "4", "--M", "2"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "method,merging_flops,statistics_flops\naverage,24,-\n");
}

TEST(Cli, CostTableAndJson) {
  const auto table = invoke({"cost", "--table", "--d", "3", "--k", "4", "--M", "2", "--T", "10"});
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("regmean,192,720"), std::string::npos) << table.out;
  EXPECT_NE(table.out.find("mats,n/a,2880"), std::string::npos) << table.out;
  const auto j = nlohmann::json::parse(invoke({"cost", "--method", "dare", "--d", "3072", "--k", "768", "--M", "24",
                                            "--json"})
                                           .out);
  EXPECT_EQ(j[0]["merging_flops"], 342097920u);
}

TEST(Cli, CostErrorsAreInvalidUsage) {
  EXPECT_EQ(invoke({"cost", "--method", "nope", "--d", "1", "--k", "1", "--M", "1"}).code, 2);
  EXPECT_EQ(invoke({"cost", "--method", "average", "--d", "1"}).code, 2);
  EXPECT_EQ(invoke({"cost", "--method", "mats", "--d", "1", "--k", "1", "--M", "1"}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(Cli, SweepListsGrids) {
  const auto r = invoke({"sweep", "--method", "regmean,average"});
  EXPECT_EQ(r.code, 0);
  std::istringstream in(r.out);
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, 1 + 11 + 1);
}

TEST(Cli, MergeWritesOutputsAndReplays) {
  MergeFixture fx(2, 5);
  write_json(fx.dir / "recipe.json", recipe_to_json(fx.recipe(Method::ties)));
  const auto out = (fx.dir / "merged.mbc").string();
  const auto r = invoke({"merge", (fx.dir / "recipe.json").string(), "--out", out, "--lambda", "0.9"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("layer,d,k,merging_flops,statistics_flops"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(out + ".cost.json"));
  const auto saved = nlohmann::json::parse(file_bytes(out + ".recipe.json"));
  EXPECT_EQ(saved["hyperparameters"]["lambda"], 0.9);

  const auto replay = invoke({"merge", out + ".recipe.json", "--out", (fx.dir / "again.mbc").string()});
  ASSERT_EQ(replay.code, 0) << replay.err;
  EXPECT_EQ(file_bytes(out), file_bytes(fx.dir / "again.mbc"));

  auto reference = fx.recipe(Method::ties);
  reference.hp.lambda = 0.9;
  EXPECT_TRUE(bit_identical(read_container(out), merge_models(config_of(reference), load_inputs(reference))));
}

TEST(Cli, MergeExitCodes) {
  MergeFixture fx(3, 6);
  write_json(fx.dir / "fisher.json", recipe_to_json(fx.recipe(Method::fisher, false)));
  const auto missing = invoke({"merge", (fx.dir / "fisher.json").string(), "--out", (fx.dir / "x.mbc").string()});
  EXPECT_EQ(missing.code, 3);
  EXPECT_NE(missing.err.find("statistics required"), std::string::npos) << missing.err;

  EXPECT_EQ(invoke({"merge", (fx.dir / "absent.json").string(), "--out", (fx.dir / "x.mbc").string()}).code, 4);

  testing_support::write_bytes(fx.model_paths[0], "short");
  write_json(fx.dir / "avg.json", recipe_to_json(fx.recipe(Method::average, false)));
  EXPECT_EQ(invoke({"merge", (fx.dir / "avg.json").string(), "--out", (fx.dir / "x.mbc").string()}).code, 4);

  write_json(fx.dir / "bad.json", nlohmann::json{{"method", "average"}});
  EXPECT_EQ(invoke({"merge", (fx.dir / "bad.json").string(), "--out", (fx.dir / "x.mbc").string()}).code, 2);

  // Three inputs that cancel: the mean direction is undefined.
  TempDir dir;
  write_container(testing_support::single("w", {1, 2}), dir / "a.mbc");
  write_container(testing_support::single("w", {-1, -2}), dir / "b.mbc");
  write_container(testing_support::single("w", {0, 0}), dir / "c.mbc");
  write_json(dir / "mlerp.json", nlohmann::json{{"method", "slerp"}, {"constituents", {"a.mbc", "b.mbc", "c.mbc"}}});
  const auto numeric = invoke({"merge", (dir / "mlerp.json").string(), "--out", (dir / "m.mbc").string()});
  EXPECT_EQ(numeric.code, 1) << numeric.err;
}

TEST(Cli, ThreadsDoNotChangeMergeBytes) {
  MergeFixture fx(3, 7);
  write_json(fx.dir / "r.json", recipe_to_json(fx.recipe(Method::mats)));
  ASSERT_EQ(invoke({"--threads", "1", "merge", (fx.dir / "r.json").string(), "--out", (fx.dir / "a.mbc").string()}).code,
            0);
  ASSERT_EQ(invoke({"--threads", "4", "merge", (fx.dir / "r.json").string(), "--out", (fx.dir / "b.mbc").string()}).code,
            0);
  EXPECT_EQ(file_bytes(fx.dir / "a.mbc"), file_bytes(fx.dir / "b.mbc"));
}

TEST(Cli, StatsWritesManifestAndReplays) {
  TempDir dir;
  TensorMap model;
  model.emplace("l0.weight", Tensor({3, 2}, {0.5f, -0.2f, 0.1f, 0.3f, -0.4f, 0.2f}));
  model.emplace("l0.bias", Tensor({2}, {0.1f, -0.1f}));
  write_container(model, dir / "model.mbc");
  TensorMap data;
  data.emplace("inputs", Tensor({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1}));
  data.emplace("targets", Tensor({4, 2}, {1, 0, 0, 1, 1, 1, 0, 0}));
  write_container(data, dir / "data.mbc");

  const auto out = (dir / "stats.mbc").string();
  const auto r = invoke({"stats", "--model", (dir / "model.mbc").string(), "--data", (dir / "data.mbc").string(), "--out",
                      out, "--samples", "3", "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("gram/l0.weight,[3,3]"), std::string::npos) << r.out;
  const auto stats = read_container(out);
  EXPECT_TRUE(stats.contains("fisher/l0.bias"));
  EXPECT_FALSE(stats.contains("trim/l0.weight"));

  const auto again = invoke({"stats", "--config", out + ".json", "--out", (dir / "again.mbc").string()});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(file_bytes(out), file_bytes(dir / "again.mbc"));

  const auto other_seed =
      invoke({"stats", "--config", out + ".json", "--seed", "5", "--out", (dir / "seed5.mbc").string()});
  ASSERT_EQ(other_seed.code, 0);
  EXPECT_NE(file_bytes(out), file_bytes(dir / "seed5.mbc"));

  EXPECT_EQ(invoke({"stats", "--out", (dir / "x.mbc").string()}).code, 2);
  EXPECT_EQ(invoke({"stats", "--model", (dir / "model.mbc").string(), "--data", (dir / "data.mbc").string(), "--loss",
                 "cross_entropy", "--out", (dir / "x.mbc").string()})
                .code,
            2);
}

TEST(Cli, BenchIsByteIdenticalAcrossThreadsAndReplays) {
  TempDir dir;
  auto one = small_bench_flags();
  one.insert(one.begin(), {"--threads", "1", "--out-dir", (dir / "t1").string()});
  auto three = small_bench_flags();
  three.insert(three.begin(), {"--threads", "3", "--out-dir", (dir / "t3").string()});
  const auto a = invoke(one);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(invoke(three).code, 0);
  for (const char* f : {"sweep.csv", "scaling.csv", "manifest.json"}) {
    EXPECT_EQ(file_bytes(dir / "t1" / f), file_bytes(dir / "t3" / f)) << f;
  }
  const auto replay = invoke({"--out-dir", (dir / "replay").string(), "bench", "--config", (dir / "t1" / "manifest.json").string()});
  ASSERT_EQ(replay.code, 0) << replay.err;
  for (const char* f : {"sweep.csv", "scaling.csv", "manifest.json"}) {
    EXPECT_EQ(file_bytes(dir / "t1" / f), file_bytes(dir / "replay" / f)) << f;
  }
  EXPECT_NE(a.out.find("dare,p,"), std::string::npos);
}

TEST(Cli, BenchOutputDirectoryFromEnvironment) {
  TempDir dir;
  const auto target = dir / "from-env";
  ::setenv(cli::kOutputDirEnv, target.c_str(), 1);
  const auto r = invoke({"bench", "--domains", "2", "--tasks", "2", "--methods", "average"});
  ::unsetenv(cli::kOutputDirEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(target / "sweep.csv"));
  EXPECT_TRUE(std::filesystem::exists(target / "manifest.json"));
  EXPECT_FALSE(std::filesystem::exists(target / "scaling.csv"));

  EXPECT_EQ(invoke({"--out-dir", (dir / "bad").string(), "bench", "--domains", "1"}).code, 2);
  EXPECT_EQ(invoke({"--out-dir", (dir / "bad").string(), "bench", "--domains", "3", "--tasks", "3", "--scaling",
                 "--m-max", "4", "--methods", "average"})
                .code,
            2);
}

TEST(Cli, TimeReportsEveryLayer) {
  MergeFixture fx(2, 8);
  write_json(fx.dir / "r.json", recipe_to_json(fx.recipe(Method::fisher)));
  const auto r = invoke({"time", (fx.dir / "r.json").string(), "--repeats", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "layer,d,k,merging_flops,repeats,mean_seconds,stddev_seconds");
  EXPECT_EQ(invoke({"time", (fx.dir / "r.json").string(), "--repeats", "1"}).code, 2);
}
