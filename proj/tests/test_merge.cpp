// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>
#include <string>
#include <vector>

#include "mergebench/merge.hpp"
#include "mergebench/timing.hpp"
#include "merge_fixture.hpp"
#include "support.hpp"

using namespace mergebench;
using testing_support::MergeFixture;

namespace {

constexpr Method kEight[] = {Method::average, Method::slerp, Method::task_arithmetic, Method::dare,
                             Method::ties,    Method::fisher, Method::regmean,        Method::mats};

TensorMap merged_on_disk(const MergeRecipe& r, const std::filesystem::path& out, unsigned threads = 1) {
  RunOptions options;
  options.threads = threads;
  run_merge(r, out, options);
  return read_container(out);
}

template <class Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(RunMerge, AverageOfTwoContainers) {
  testing_support::TempDir dir;
  write_container(testing_support::single("w", {1, 3}), dir / "a.mbc");
  write_container(testing_support::single("w", {3, 5}), dir / "b.mbc");
  MergeRecipe r;
  r.constituents = {dir / "a.mbc", dir / "b.mbc"};
  const auto out = merged_on_disk(r, dir / "avg.mbc");
  EXPECT_EQ(out.at("w").values, (std::vector<float>{2, 4}));
}

TEST(RunMerge, FisherWithoutStatisticsNeedsThem) {
  MergeFixture fx(2);
  const auto msg = error_of([&] { run_merge(fx.recipe(Method::fisher, false), fx.dir / "x.mbc"); });
  EXPECT_NE(msg.find("statistics required"), std::string::npos) << msg;
  EXPECT_THROW(run_merge(fx.recipe(Method::fisher, false), fx.dir / "x.mbc"), PrerequisiteError);
  EXPECT_FALSE(std::filesystem::exists(fx.dir / "x.mbc"));
}

TEST(RunMerge, TaskVectorMethodsNeedBase) {
  MergeFixture fx(2);
  auto r = fx.recipe(Method::task_arithmetic);
  r.base.reset();
  EXPECT_THROW(run_merge(r, fx.dir / "x.mbc"), PrerequisiteError);
}

TEST(RunMerge, DareIsDeterministicForAFixedSeed) {
  MergeFixture fx(3);
  const auto r = fx.recipe(Method::dare);
  run_merge(r, fx.dir / "d1.mbc");
  run_merge(r, fx.dir / "d2.mbc");
  EXPECT_EQ(testing_support::file_bytes(fx.dir / "d1.mbc"), testing_support::file_bytes(fx.dir / "d2.mbc"));
  auto other = r;
  other.hp.seed = 6;
  run_merge(other, fx.dir / "d3.mbc");
  EXPECT_NE(testing_support::file_bytes(fx.dir / "d1.mbc"), testing_support::file_bytes(fx.dir / "d3.mbc"));
}

TEST(RunMerge, StreamingEqualsInMemoryForEveryMethod) {
  for (int m : {2, 3}) {
    MergeFixture fx(m, 10 + static_cast<std::uint64_t>(m));
    for (Method method : kEight) {
      for (bool with_stats : {true, false}) {
        if (needs_statistics(method) && !with_stats) continue;
        const auto r = fx.recipe(method, with_stats);
        const auto expected = merge_models(config_of(r), load_inputs(r));
        for (unsigned threads : {1u, 2u, 4u}) {
          const auto path = fx.dir / ("out-" + std::string(to_string(method)) + std::to_string(threads) + ".mbc");
          EXPECT_TRUE(bit_identical(merged_on_disk(r, path, threads), expected))
              << to_string(method) << " M=" << m << " threads=" << threads << " stats=" << with_stats;
        }
      }
    }
  }
}

TEST(RunMerge, OutputBytesDoNotDependOnThreads) {
  MergeFixture fx(3, 21);
  for (Method method : kEight) {
    const auto r = fx.recipe(method);
    run_merge(r, fx.dir / "t1.mbc", {1});
    run_merge(r, fx.dir / "t3.mbc", {3});
    EXPECT_EQ(testing_support::file_bytes(fx.dir / "t1.mbc"), testing_support::file_bytes(fx.dir / "t3.mbc"))
        << to_string(method);
  }
}

TEST(RunMerge, SlerpWithThreeModelsRunsMlerp) {
  MergeFixture fx(3, 31);
  const auto r = fx.recipe(Method::slerp);
  EXPECT_EQ(r.effective_method(), Method::mlerp);
  const auto out = merged_on_disk(r, fx.dir / "s.mbc");
  EXPECT_TRUE(bit_identical(out, merge_mlerp(fx.models)));
}

TEST(RunMerge, MissingGramIsNamed) {
  MergeFixture fx(2, 41);
  auto stats = fx.statistics[1];
  stats.erase("gram/out.weight");
  write_container(stats, fx.stats_paths[1]);
  const auto msg = error_of([&] { run_merge(fx.recipe(Method::regmean), fx.dir / "x.mbc"); });
  EXPECT_NE(msg.find("gram/out.weight"), std::string::npos) << msg;
  EXPECT_THROW(run_merge(fx.recipe(Method::regmean), fx.dir / "x.mbc"), PrerequisiteError);
}

TEST(RunMerge, ManifestMismatchIsAShapeError) {
  MergeFixture fx(2, 51);
  auto bad = fx.models[1];
  bad.at("emb") = Tensor({2, 3}, bad.at("emb").values);
  write_container(bad, fx.model_paths[1]);
  const auto msg = error_of([&] { run_merge(fx.recipe(Method::average), fx.dir / "x.mbc"); });
  EXPECT_NE(msg.find("emb"), std::string::npos) << msg;
  EXPECT_THROW(run_merge(fx.recipe(Method::average), fx.dir / "x.mbc"), ShapeError);

  MergeFixture other(2, 52);
  auto base = other.base;
  base.erase("emb");
  write_container(base, other.base_path);
  EXPECT_THROW(run_merge(other.recipe(Method::task_arithmetic), other.dir / "x.mbc"), ShapeError);
}

TEST(RunMerge, LinearLayersMustBeTwoDimensional) {
  MergeFixture fx(2, 61);
  auto r = fx.recipe(Method::regmean);
  r.linear_layers = {"fc.bias"};
  EXPECT_THROW(run_merge(r, fx.dir / "x.mbc"), ShapeError);
  r.linear_layers = {"nope"};
  EXPECT_THROW(run_merge(r, fx.dir / "x.mbc"), ConfigError);
  r.linear_layers.clear();
  EXPECT_THROW(run_merge(r, fx.dir / "x.mbc"), ConfigError);
}

TEST(RunMerge, CostReportCoversEveryTensor) {
  MergeFixture fx(2, 71);
  const auto result = run_merge(fx.recipe(Method::task_arithmetic), fx.dir / "c.mbc");
  ASSERT_EQ(result.cost.layers.size(), 4u);
  std::uint64_t total = 0;
  for (const auto& l : result.cost.layers) {
    EXPECT_EQ(l.merging, (2 * 2 + 1) * l.d * l.k);
    total += l.merging;
  }
  EXPECT_EQ(result.cost.total_merging, total);
}

TEST(RunMerge, SingularGramWarns) {
  MergeFixture fx(1, 81);
  auto stats = fx.statistics[0];
  stats.at("gram/fc.weight") = Tensor({4, 4}, std::vector<float>(16, 1.0f));
  write_container(stats, fx.stats_paths[0]);
  std::ostringstream log;
  RunOptions options;
  options.log = &log;
  auto r = fx.recipe(Method::regmean);
  r.hp.lambda_offdiag = 1.0;  // any shrinkage would make the all-ones Gram invertible
  const auto result = run_merge(r, fx.dir / "r.mbc", options);
  ASSERT_EQ(result.warnings.size(), 1u);
  EXPECT_NE(log.str().find("fc.weight"), std::string::npos);
}

TEST(Recipe, JsonRoundTrip) {
  MergeFixture fx(2, 91);
  const auto r = fx.recipe(Method::mats);
  const auto back = recipe_from_json(recipe_to_json(r));
  EXPECT_EQ(back.method, r.method);
  EXPECT_EQ(back.constituents, r.constituents);
  EXPECT_EQ(back.base, r.base);
  EXPECT_EQ(back.statistics, r.statistics);
  EXPECT_EQ(back.linear_layers, r.linear_layers);
  EXPECT_EQ(back.hp.lambda, r.hp.lambda);
  EXPECT_EQ(back.hp.dropout, r.hp.dropout);
  EXPECT_EQ(back.hp.cg_iterations, r.hp.cg_iterations);
  EXPECT_EQ(back.hp.seed, r.hp.seed);
  EXPECT_EQ(recipe_to_json(back), recipe_to_json(r));
}

TEST(Recipe, RelativePathsResolveAgainstTheRecipeDirectory) {
  const auto r = recipe_from_json(nlohmann::json{{"method", "average"}, {"constituents", {"a.mbc", "/abs/b.mbc"}}},
                                  "/data/run");
  EXPECT_EQ(r.constituents[0], std::filesystem::path("/data/run/a.mbc"));
  EXPECT_EQ(r.constituents[1], std::filesystem::path("/abs/b.mbc"));
}

TEST(Recipe, ValidationErrors) {
  EXPECT_THROW(recipe_from_json(nlohmann::json{{"method", "average"}}), ConfigError);
  EXPECT_THROW(recipe_from_json(nlohmann::json{{"method", "nope"}, {"constituents", {"a"}}}), ConfigError);
  EXPECT_THROW(recipe_from_json(nlohmann::json{{"method", "average"}, {"constituents", {"a"}}, {"extra", 1}}),
               ConfigError);
  EXPECT_THROW(
      recipe_from_json(nlohmann::json{{"method", "dare"}, {"constituents", {"a"}}, {"hyperparameters", {{"q", 1}}}}),
      ConfigError);
  MergeRecipe r;
  r.method = Method::dare;
  r.constituents = {"a"};
  r.base = "b";
  r.hp.dropout = 1.0;
  EXPECT_THROW(r.validate(), ConfigError);
  r.method = Method::slerp;
  EXPECT_THROW(r.validate(), ConfigError);
  r.method = Method::ties;
  r.hp.k_fraction = 0.0;
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(TimeMerge, ReportsTimingsAndTheSameMerge) {
  MergeFixture fx(2, 101);
  const auto r = fx.recipe(Method::average);
  const auto timed = time_merge(r, 5);
  ASSERT_EQ(timed.report.layers.size(), 4u);
  for (const auto& l : timed.report.layers) {
    ASSERT_TRUE(l.timing);
    EXPECT_EQ(l.timing->repeats, 5);
    EXPECT_GE(l.timing->mean_seconds, 0.0);
    EXPECT_GE(l.timing->stddev_seconds, 0.0);
  }
  EXPECT_TRUE(bit_identical(timed.merged, merge_models(config_of(r), load_inputs(r))));
  EXPECT_THROW(time_merge(r, 1), ConfigError);
}

TEST(TimeMerge, RegMeanCostsMoreThanFisherOnWideLayers) {
  MergeFixture fx(2, 111, {{"w", {64, 64}}});
  auto regmean = fx.recipe(Method::regmean);
  regmean.linear_layers = {"w"};
  auto fisher = fx.recipe(Method::fisher);
  const auto slow = time_merge(regmean, 5).report.layers[0];
  const auto fast = time_merge(fisher, 5).report.layers[0];
  EXPECT_GT(slow.merging, fast.merging);
  EXPECT_GT(slow.timing->mean_seconds, fast.timing->mean_seconds);
}
