// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. run_cli() is the whole program minus main(), so tests
// can drive it with captured streams.
//
// Exit codes: 0 success, 1 numeric failure, 2 invalid recipe / config / usage,
// 3 missing prerequisite, 4 I/O or container format error.

#ifndef MERGEBENCH_CLI_HPP
#define MERGEBENCH_CLI_HPP

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mergebench/bench/report.hpp"
#include "mergebench/checkpoint.hpp"
#include "mergebench/cost_model.hpp"
#include "mergebench/errors.hpp"
#include "mergebench/merge.hpp"
#include "mergebench/recipe.hpp"
#include "mergebench/statistics.hpp"
#include "mergebench/timing.hpp"

namespace mergebench::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kNumeric = 1, kInvalid = 2, kPrerequisite = 3, kIo = 4 };

inline constexpr const char* kOutputDirEnv = "MERGEBENCH_OUTPUT_DIR";

struct Globals {
  unsigned threads = 1;
  bool verbose = false;
  bool strict_finite = false;
  std::string out_dir;  // --out-dir, else $MERGEBENCH_OUTPUT_DIR
};

// Directory for relative output paths: --out-dir, then the environment.
inline fs::path output_dir(const Globals& g) {
  if (!g.out_dir.empty()) return g.out_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return {};
}

inline fs::path resolve_output(const fs::path& p, const Globals& g) {
  if (p.is_absolute()) return p;
  const auto dir = output_dir(g);
  return dir.empty() ? p : dir / p;
}

inline void ensure_parent(const fs::path& p) {
  if (!p.has_parent_path()) return;
  std::error_code ec;
  fs::create_directories(p.parent_path(), ec);
  if (ec) throw IoError("cannot create '" + p.parent_path().string() + "': " + ec.message());
}

inline fs::path absolute_path(const fs::path& p) {
  std::error_code ec;
  auto a = fs::absolute(p, ec);
  return ec ? p : a.lexically_normal();
}

inline bool option_given(const CLI::App* app, const char* name) {
  if (!app) return false;
  const auto* o = app->get_option_no_throw(name);
  return o && o->count() > 0;
}

// ---------------------------------------------------------------------------
// merge

struct MergeArgs {
  std::string recipe;
  std::string out;
  std::string method;
  double lambda = 0, p = 0, k_fraction = 0, lambda_offdiag = 0, slerp_t = 0;
  int cg_iterations = 0;
  std::uint64_t seed = 0;
  CLI::App* app = nullptr;

  bool given(const char* name) const { return option_given(app, name); }
};

// Flags win over recipe values.
inline void apply_overrides(MergeRecipe& r, const MergeArgs& a) {
  if (a.given("--method")) r.method = require_method(a.method);
  if (a.given("--lambda")) r.hp.lambda = a.lambda;
  if (a.given("--p")) r.hp.dropout = a.p;
  if (a.given("--k-fraction")) r.hp.k_fraction = a.k_fraction;
  if (a.given("--lambda-offdiag")) r.hp.lambda_offdiag = a.lambda_offdiag;
  if (a.given("--cg-iterations")) r.hp.cg_iterations = a.cg_iterations;
  if (a.given("--seed")) r.hp.seed = a.seed;
  if (a.given("--slerp-t")) r.hp.slerp_t = a.slerp_t;
}

inline MergeRecipe resolved_recipe(const std::string& path, const MergeArgs& a) {
  MergeRecipe r = load_recipe(path);
  apply_overrides(r, a);
  for (auto& p : r.constituents) p = absolute_path(p);
  if (r.base) r.base = absolute_path(*r.base);
  for (auto& p : r.statistics) p = absolute_path(p);
  return r;
}

inline int cmd_merge(const MergeArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  const MergeRecipe recipe = resolved_recipe(a.recipe, a);
  const fs::path target = resolve_output(a.out, g);
  ensure_parent(target);
  RunOptions options;
  options.threads = g.threads;
  options.strict_finite = g.strict_finite;
  options.log = &err;
  const auto result = run_merge(recipe, target, options);
  bench::write_text(target.string() + ".cost.json", cost::to_json(result.cost).dump(2) + "\n");
  bench::write_text(target.string() + ".recipe.json", recipe_to_json(recipe).dump(2) + "\n");
  if (g.verbose) err << "wrote " << target.string() << '\n';
  out << cost::to_csv(result.cost);
  return kOk;
}

// ---------------------------------------------------------------------------
// stats

struct StatsArgs {
  std::string config;
  std::string model, data, out, base;
  double k_fraction = 0.2;
  std::vector<std::string> layers;
  bool tanh_hidden = false;
  std::string loss = "squared_error";
  bool empirical = false;
  int samples = 1;
  std::uint64_t seed = 0;
  bool no_fisher = false, no_gram = false;
  CLI::App* app = nullptr;

  bool given(const char* name) const { return option_given(app, name); }
};

inline stats::Dataset load_dataset(const fs::path& path, stats::Loss loss) {
  const TensorMap data = read_container(path);
  auto inputs = data.find("inputs");
  if (inputs == data.end() || inputs->second.shape.size() != 2) {
    throw ConfigError("data container needs a 2-D 'inputs' tensor [n, d]");
  }
  stats::Dataset ds;
  const auto n = inputs->second.shape[0];
  ds.x = linalg::to_matrix(inputs->second.values, n, inputs->second.shape[1]);
  if (auto t = data.find("targets"); t != data.end()) {
    if (t->second.shape.size() != 2 || t->second.shape[0] != n) throw ConfigError("'targets' must be [n, k]");
    ds.y = linalg::to_matrix(t->second.values, n, t->second.shape[1]);
  }
  if (auto l = data.find("labels"); l != data.end()) {
    if (static_cast<std::int64_t>(l->second.numel()) != n) throw ConfigError("'labels' must hold n values");
    for (float v : l->second.values) ds.labels.push_back(static_cast<int>(v));
  }
  if (loss == stats::Loss::cross_entropy && ds.labels.empty()) throw ConfigError("cross entropy needs 'labels'");
  return ds;
}

inline nlohmann::json stats_manifest(const StatsArgs& a) {
  return {{"model", absolute_path(a.model).string()},
          {"data", absolute_path(a.data).string()},
          {"base", a.base.empty() ? nlohmann::json(nullptr) : nlohmann::json(absolute_path(a.base).string())},
          {"k_fraction", a.k_fraction},
          {"layers", a.layers},
          {"tanh_hidden", a.tanh_hidden},
          {"loss", a.loss},
          {"fisher", !a.no_fisher},
          {"fisher_mode", a.empirical ? "empirical" : "sampled"},
          {"samples", a.samples},
          {"seed", a.seed},
          {"gram", !a.no_gram}};
}

// A previous run's manifest supplies defaults; flags given now win.
inline StatsArgs resolved_stats_args(const StatsArgs& flags) {
  StatsArgs a = flags;
  if (!flags.config.empty()) {
    const auto j = load_json_file(flags.config);
    try {
      if (!flags.given("--model")) a.model = j.at("model").get<std::string>();
      if (!flags.given("--data")) a.data = j.at("data").get<std::string>();
      if (!flags.given("--base") && !j.value("base", nlohmann::json()).is_null()) a.base = j.at("base").get<std::string>();
      if (!flags.given("--k-fraction")) a.k_fraction = j.value("k_fraction", a.k_fraction);
      if (!flags.given("--layers")) a.layers = j.value("layers", a.layers);
      if (!flags.given("--tanh-hidden")) a.tanh_hidden = j.value("tanh_hidden", a.tanh_hidden);
      if (!flags.given("--loss")) a.loss = j.value("loss", a.loss);
      if (!flags.given("--empirical")) a.empirical = j.value("fisher_mode", std::string("sampled")) == "empirical";
      if (!flags.given("--samples")) a.samples = j.value("samples", a.samples);
      if (!flags.given("--seed")) a.seed = j.value("seed", a.seed);
      if (!flags.given("--no-fisher")) a.no_fisher = !j.value("fisher", true);
      if (!flags.given("--no-gram")) a.no_gram = !j.value("gram", true);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid stats manifest: ") + e.what());
    }
  }
  if (a.model.empty() || a.data.empty()) throw ConfigError("stats: --model and --data are required");
  return a;
}

inline int cmd_stats(const StatsArgs& flags, const Globals& g, std::ostream& out, std::ostream& err) {
  const StatsArgs a = resolved_stats_args(flags);
  stats::Loss loss;
  if (a.loss == "squared_error" || a.loss == "mse") {
    loss = stats::Loss::squared_error;
  } else if (a.loss == "cross_entropy" || a.loss == "ce") {
    loss = stats::Loss::cross_entropy;
  } else {
    throw ConfigError("unknown loss '" + a.loss + "' (known: squared_error, cross_entropy)");
  }
  const TensorMap model_tensors = read_container(a.model);
  const auto model = stats::ToyModel::from_tensors(model_tensors, a.layers, a.tanh_hidden, loss);
  const auto data = load_dataset(a.data, loss);
  std::optional<TensorMap> base;
  if (!a.base.empty()) base = read_container(a.base);

  stats::StatisticsOptions options;
  options.fisher = !a.no_fisher;
  options.gram = !a.no_gram;
  options.base = base ? &*base : nullptr;
  options.k_fraction = a.k_fraction;
  options.fisher_options.mode = a.empirical ? stats::FisherMode::empirical : stats::FisherMode::sampled;
  options.fisher_options.samples = a.samples;
  options.fisher_options.seed = a.seed;
  const TensorMap result = stats::build_statistics(model, data, options);
  if (result.empty()) throw ConfigError("stats: nothing to compute (Fisher and Gram disabled, no base)");

  const fs::path target = resolve_output(a.out, g);
  ensure_parent(target);
  write_container(result, target, {g.strict_finite});
  bench::write_text(target.string() + ".json", stats_manifest(a).dump(2) + "\n");
  if (g.verbose) err << "wrote " << target.string() << '\n';
  out << "tensor,shape\n";
  for (const auto& [name, t] : result) out << name << ',' << shape_to_string(t.shape) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// cost

struct CostArgs {
  std::string method;
  std::string recipe;
  std::uint64_t d = 0, k = 0, M = 0, N = 0, K = 0, T = 0;
  bool table = false;
  bool json = false;
  CLI::App* app = nullptr;

  bool given(const char* name) const { return option_given(app, name); }
};

inline std::string cell(Method m, const std::optional<cost::Flops>& v, bool statistics) {
  if (statistics && !cost::has_statistics(m)) return "-";
  return v ? std::to_string(*v) : "n/a";
}

inline int cmd_cost(const CostArgs& a, const Globals&, std::ostream& out, std::ostream&) {
  if (!a.recipe.empty()) {
    MergeRecipe r = load_recipe(a.recipe);
    if (r.constituents.empty()) throw ConfigError("cost: recipe lists no constituents");
    ContainerReader reader(r.constituents.front());
    cost::ReportOptions options;
    options.linear_layers = r.linear_layers;
    options.k_fraction = r.hp.k_fraction;
    if (r.effective_method() == Method::mats) options.cg_iterations = static_cast<std::uint64_t>(r.hp.cg_iterations);
    if (a.given("--T")) options.tokens = a.T;
    const auto report = cost::cost_report(r.effective_method(), reader.manifest(), r.constituents.size(), options);
    out << (a.json ? cost::to_json(report).dump(2) + "\n" : cost::to_csv(report));
    return kOk;
  }
  for (const char* dim : {"--d", "--k", "--M"}) {
    if (!a.given(dim)) throw ConfigError(std::string("cost: ") + dim + " is required");
  }
  cost::LayerDims dims{a.d, a.k, a.M, std::nullopt, std::nullopt, std::nullopt};
  if (a.given("--N")) dims.N = a.N;
  if (a.given("--K")) dims.K = a.K;
  if (a.given("--T")) dims.T = a.T;

  std::vector<cost::TableRow> rows;
  if (a.table) {
    rows = cost::cost_table(dims);
  } else {
    if (a.method.empty()) throw ConfigError("cost: give --method or --table (known methods: " + method_list() + ")");
    const Method m = require_method(a.method);
    cost::TableRow row{m, cost::merging_flops(m, dims), std::nullopt};
    try {
      row.statistics = cost::statistics_flops(m, dims);
    } catch (const ConfigError&) {
    }
    rows.push_back(row);
  }
  if (a.json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      j.push_back({{"method", std::string(to_string(r.method))},
                   {"merging_flops", r.merging ? nlohmann::json(*r.merging) : nlohmann::json(nullptr)},
                   {"statistics_flops", !cost::has_statistics(r.method) ? nlohmann::json(0)
                                        : r.statistics                  ? nlohmann::json(*r.statistics)
                                                                        : nlohmann::json(nullptr)}});
    }
    out << j.dump(2) << '\n';
  } else {
    out << cost::table_csv(rows);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep (grids only)

struct SweepArgs {
  std::vector<std::string> methods;
};

inline int cmd_sweep(const SweepArgs& a, const Globals&, std::ostream& out, std::ostream&) {
  std::vector<Method> methods;
  for (const auto& m : a.methods) methods.push_back(require_method(m));
  if (methods.empty()) methods.assign(kAllMethods.begin(), kAllMethods.end());
  out << bench::grid_csv(methods);
  return kOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string config;
  std::vector<std::string> methods;
  bool sweep = false, scaling = false, references = false;
  int m_min = 0, m_max = 0, repeats = 0, domains = 0, tasks = 0;
  std::uint64_t seed = 0, chain_seed = 0, merge_seed = 0;
  CLI::App* app = nullptr;

  bool given(const char* name) const { return option_given(app, name); }
};

// Config file first, then flags.
inline bench::BenchConfig resolved_bench_config(const BenchArgs& a) {
  bench::BenchConfig c;
  if (!a.config.empty()) c = bench::bench_config_from_json(load_json_file(a.config));
  if (a.given("--methods")) {
    c.methods.clear();
    for (const auto& m : a.methods) c.methods.push_back(require_method(m));
  }
  if (a.sweep || a.scaling) {
    c.sweep = a.sweep;
    c.scaling = a.scaling;
  }
  if (a.given("--m-min")) c.m_min = a.m_min;
  if (a.given("--m-max")) c.m_max = a.m_max;
  if (a.given("--repeats")) c.repeats = a.repeats;
  if (a.given("--chain-seed")) c.chain_seed = a.chain_seed;
  if (a.given("--merge-seed")) c.merge_seed = a.merge_seed;
  if (a.given("--seed")) c.scenario.seed = a.seed;
  if (a.given("--domains")) c.scenario.domains = a.domains;
  if (a.given("--tasks")) c.scenario.tasks = a.tasks;
  if (a.references) c.references = true;
  c.scenario.validate();
  if (c.methods.empty()) throw ConfigError("bench: no methods");
  return c;
}

inline int cmd_bench(const BenchArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  const auto config = resolved_bench_config(a);
  const auto outputs = bench::run_bench(config, g.threads);
  fs::path dir = output_dir(g);
  if (dir.empty()) dir = "mergebench-bench";
  bench::write_bench_outputs(outputs, dir);
  if (g.verbose) err << "wrote bench outputs to " << dir.string() << '\n';
  if (config.sweep) {
    out << "method,hyperparameter,best_index,best_value,held_in,generalization\n";
    for (const auto& r : outputs.sweeps) {
      const auto& p = r.curve[r.best];
      out << to_string(r.method) << ',' << r.hyperparameter << ',' << p.index << ','
          << (p.value ? bench::format_double(*p.value) : "") << ',' << bench::format_double(p.scores.held_in) << ','
          << bench::format_double(p.scores.generalization) << '\n';
    }
  }
  if (config.scaling) out << outputs.scaling_csv;
  return kOk;
}

// ---------------------------------------------------------------------------
// time

struct TimeArgs {
  std::string recipe;
  int repeats = 10;
  bool json = false;
};

inline int cmd_time(const TimeArgs& a, const Globals&, std::ostream& out, std::ostream&) {
  const auto recipe = resolved_recipe(a.recipe, MergeArgs{});
  const auto timed = time_merge(recipe, a.repeats);
  if (a.json) {
    out << cost::to_json(timed.report).dump(2) << '\n';
    return kOk;
  }
  out << "layer,d,k,merging_flops,repeats,mean_seconds,stddev_seconds\n";
  for (const auto& l : timed.report.layers) {
    out << l.name << ',' << l.d << ',' << l.k << ',' << l.merging << ',' << l.timing->repeats << ','
        << bench::format_double(l.timing->mean_seconds) << ',' << bench::format_double(l.timing->stddev_seconds)
        << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const PrerequisiteError*>(&e)) return kPrerequisite;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kInvalid;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kIo;
  return kNumeric;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"mergebench: model merging, statistics, cost model and benchmark", "mergebench"};
  app.require_subcommand(1, 1);
  Globals g;
  app.add_option("--threads", g.threads, "Worker cap for block merges and bench chains")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", g.verbose, "Diagnostics on stderr");
  app.add_flag("--strict-finite", g.strict_finite, "Refuse to write NaN or Inf values");
  app.add_option("--out-dir", g.out_dir, std::string("Directory for relative outputs (default $") + kOutputDirEnv + ")");

  MergeArgs merge;
  auto* merge_cmd = app.add_subcommand("merge", "Merge constituent checkpoints per a JSON recipe");
  merge.app = merge_cmd;
  merge_cmd->fallthrough();
  merge_cmd->add_option("recipe", merge.recipe, "Recipe JSON")->required();
  merge_cmd->add_option("--out", merge.out, "Output container")->required();
  merge_cmd->add_option("--method", merge.method);
  merge_cmd->add_option("--lambda", merge.lambda);
  merge_cmd->add_option("--p", merge.p);
  merge_cmd->add_option("--k-fraction", merge.k_fraction);
  merge_cmd->add_option("--lambda-offdiag", merge.lambda_offdiag);
  merge_cmd->add_option("--cg-iterations", merge.cg_iterations);
  merge_cmd->add_option("--seed", merge.seed);
  merge_cmd->add_option("--slerp-t", merge.slerp_t);

  StatsArgs st;
  auto* stats_cmd = app.add_subcommand("stats", "Compute Fisher, Gram and trim statistics for one model");
  st.app = stats_cmd;
  stats_cmd->fallthrough();
  stats_cmd->add_option("--config", st.config, "Manifest of a previous stats run");
  stats_cmd->add_option("--model", st.model, "Model container");
  stats_cmd->add_option("--data", st.data, "Data container with 'inputs' and 'targets' or 'labels'");
  stats_cmd->add_option("--out", st.out, "Statistics container")->required();
  stats_cmd->add_option("--base", st.base, "Pretrained container; enables trim masks");
  stats_cmd->add_option("--k-fraction", st.k_fraction);
  stats_cmd->add_option("--layers", st.layers, "Layer names in forward order")->delimiter(',');
  stats_cmd->add_flag("--tanh-hidden", st.tanh_hidden);
  stats_cmd->add_option("--loss", st.loss, "squared_error or cross_entropy");
  stats_cmd->add_flag("--empirical", st.empirical, "Fisher from observed labels instead of sampled ones");
  stats_cmd->add_option("--samples", st.samples, "Label draws per example");
  stats_cmd->add_option("--seed", st.seed);
  stats_cmd->add_flag("--no-fisher", st.no_fisher);
  stats_cmd->add_flag("--no-gram", st.no_gram);

  CostArgs cost_args;
  auto* cost_cmd = app.add_subcommand("cost", "Analytic merging and statistics FLOPs");
  cost_args.app = cost_cmd;
  cost_cmd->fallthrough();
  cost_cmd->add_option("--method", cost_args.method);
  cost_cmd->add_option("--recipe", cost_args.recipe, "Per-layer report over a recipe's constituents");
  cost_cmd->add_option("--d", cost_args.d);
  cost_cmd->add_option("--k", cost_args.k);
  cost_cmd->add_option("--M", cost_args.M);
  cost_cmd->add_option("--N", cost_args.N);
  cost_cmd->add_option("--K", cost_args.K);
  cost_cmd->add_option("--T", cost_args.T);
  cost_cmd->add_flag("--table", cost_args.table, "All methods at the given dims");
  cost_cmd->add_flag("--json", cost_args.json);

  SweepArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "Print the hyperparameter grids");
  sweep_cmd->fallthrough();
  sweep_cmd->add_option("--method", sweep_args.methods)->delimiter(',');

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Synthetic benchmark: sweeps and scaling");
  bench_args.app = bench_cmd;
  bench_cmd->fallthrough();
  bench_cmd->add_option("--config", bench_args.config, "Bench config or a previous manifest.json");
  bench_cmd->add_option("--methods", bench_args.methods)->delimiter(',');
  bench_cmd->add_flag("--sweep", bench_args.sweep);
  bench_cmd->add_flag("--scaling", bench_args.scaling);
  bench_cmd->add_flag("--references", bench_args.references, "Add pretrained and multitask rows");
  bench_cmd->add_option("--m-min", bench_args.m_min);
  bench_cmd->add_option("--m-max", bench_args.m_max);
  bench_cmd->add_option("--repeats", bench_args.repeats);
  bench_cmd->add_option("--seed", bench_args.seed, "Scenario seed");
  bench_cmd->add_option("--chain-seed", bench_args.chain_seed);
  bench_cmd->add_option("--merge-seed", bench_args.merge_seed);
  bench_cmd->add_option("--domains", bench_args.domains);
  bench_cmd->add_option("--tasks", bench_args.tasks);

  TimeArgs time_args;
  auto* time_cmd = app.add_subcommand("time", "Wall-clock per-layer merge timing");
  time_cmd->fallthrough();
  time_cmd->add_option("recipe", time_args.recipe, "Recipe JSON")->required();
  time_cmd->add_option("--repeats", time_args.repeats, "R, at least 2");
  time_cmd->add_flag("--json", time_args.json);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kInvalid;
  }

  try {
    if (*merge_cmd) return cmd_merge(merge, g, out, err);
    if (*stats_cmd) return cmd_stats(st, g, out, err);
    if (*cost_cmd) return cmd_cost(cost_args, g, out, err);
    if (*sweep_cmd) return cmd_sweep(sweep_args, g, out, err);
    if (*bench_cmd) return cmd_bench(bench_args, g, out, err);
    if (*time_cmd) return cmd_time(time_args, g, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kInvalid;
}

}  // namespace mergebench::cli

#endif  // MERGEBENCH_CLI_HPP
