// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Benchmark configuration, CSV tables and the JSON run manifest. The manifest
// is the resolved configuration, so feeding it back as --config replays a run.

#ifndef MERGEBENCH_BENCH_REPORT_HPP
#define MERGEBENCH_BENCH_REPORT_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergebench/bench/harness.hpp"
#include "mergebench/bench/scenario.hpp"

namespace mergebench::bench {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::vector<Method> default_bench_methods() {
  return {Method::average,      Method::slerp, Method::task_arithmetic, Method::dare,
          Method::ties,         Method::fisher, Method::regmean,        Method::mats};
}

struct BenchConfig {
  ScenarioConfig scenario;
  std::vector<Method> methods = default_bench_methods();
  bool sweep = true;
  bool scaling = false;
  int m_min = 2;
  int m_max = 4;
  int repeats = 10;
  std::uint64_t chain_seed = 0;
  std::uint64_t merge_seed = 0;
  bool references = false;
  ConstituentOptions constituent;

  ScalingOptions scaling_options(unsigned threads) const {
    return {m_min, m_max, repeats, chain_seed, merge_seed, references, threads};
  }
};

inline nlohmann::json grids_json() {
  nlohmann::json out = nlohmann::json::object();
  for (auto m : kAllMethods) {
    if (auto axis = sweep_grid(m)) out[std::string(to_string(m))] = {{"hyperparameter", axis->hyperparameter}, {"values", axis->values}};
  }
  return out;
}

inline nlohmann::json to_json(const BenchConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : c.methods) methods.push_back(std::string(to_string(m)));
  return {{"scenario", to_json(c.scenario)},
          {"methods", methods},
          {"sweep", c.sweep},
          {"scaling", {{"enabled", c.scaling},
                       {"m_min", c.m_min},
                       {"m_max", c.m_max},
                       {"repeats", c.repeats},
                       {"chain_seed", c.chain_seed},
                       {"references", c.references}}},
          {"merge_seed", c.merge_seed},
          {"constituent", {{"k_fraction", c.constituent.k_fraction}, {"fisher_samples", c.constituent.fisher_samples}}},
          {"grids", grids_json()}};
}

inline BenchConfig bench_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("bench config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> known = {"scenario", "methods", "sweep", "scaling",
                                                "merge_seed", "constituent", "grids"};
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in bench config");
  }
  BenchConfig c;
  try {
    if (j.contains("scenario")) c.scenario = scenario_from_json(j.at("scenario"));
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(require_method(m.get<std::string>()));
    }
    c.sweep = j.value("sweep", c.sweep);
    if (j.contains("scaling")) {
      const auto& s = j.at("scaling");
      for (const auto& [key, value] : s.items()) {
        static const std::set<std::string> known = {"enabled", "m_min", "m_max", "repeats", "chain_seed", "references"};
        if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in bench scaling");
      }
      c.scaling = s.value("enabled", c.scaling);
      c.m_min = s.value("m_min", c.m_min);
      c.m_max = s.value("m_max", c.m_max);
      c.repeats = s.value("repeats", c.repeats);
      c.chain_seed = s.value("chain_seed", c.chain_seed);
      c.references = s.value("references", c.references);
    }
    c.merge_seed = j.value("merge_seed", c.merge_seed);
    if (j.contains("constituent")) {
      const auto& k = j.at("constituent");
      c.constituent.k_fraction = k.value("k_fraction", c.constituent.k_fraction);
      c.constituent.fisher_samples = k.value("fisher_samples", c.constituent.fisher_samples);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid bench config: ") + e.what());
  }
  // Grids are fixed; a manifest carrying different ones was not produced here.
  if (j.contains("grids") && j.at("grids") != grids_json()) throw ConfigError("bench config grids differ from the built-in sweep grids");
  if (c.methods.empty()) throw ConfigError("bench config lists no methods");
  return c;
}

// Columns: method,hyperparameter,index,value,selected,validation_held_in,held_in,generalization
inline std::string sweep_csv(const std::vector<SweepResult>& results) {
  std::ostringstream out;
  out << "method,hyperparameter,index,value,selected,validation_held_in,held_in,generalization\n";
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.curve.size(); ++i) {
      const auto& p = r.curve[i];
      out << to_string(r.method) << ',' << r.hyperparameter << ',' << p.index << ',';
      if (p.value) out << format_double(*p.value);
      out << ',' << (i == r.best ? 1 : 0) << ',' << format_double(p.scores.validation) << ','
          << format_double(p.scores.held_in) << ',' << format_double(p.scores.generalization) << '\n';
    }
  }
  return out.str();
}

// Columns: m,method,held_in,generalization
inline std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::ostringstream out;
  out << "m,method,held_in,generalization\n";
  for (const auto& r : rows) {
    out << r.m << ',' << r.method << ',' << format_double(r.held_in) << ',' << format_double(r.generalization) << '\n';
  }
  return out.str();
}

// Columns: method,hyperparameter,index,value
inline std::string grid_csv(const std::vector<Method>& methods) {
  std::ostringstream out;
  out << "method,hyperparameter,index,value\n";
  for (auto m : methods) {
    if (auto axis = sweep_grid(m)) {
      for (std::size_t i = 0; i < axis->values.size(); ++i) {
        out << to_string(m) << ',' << axis->hyperparameter << ',' << i << ',' << format_double(axis->values[i]) << '\n';
      }
    } else {
      out << to_string(m) << ",," << kDefaultIndex << ",\n";
    }
  }
  return out.str();
}

struct BenchOutputs {
  std::string sweep_csv;  // empty when the sweep was not run
  std::string scaling_csv;
  nlohmann::json manifest;
  std::vector<SweepResult> sweeps;
  std::vector<ScalingRow> scaling;
};

inline BenchOutputs run_bench(const BenchConfig& config, unsigned threads = 1) {
  BenchOutputs out;
  const Scenario scenario = generate_scenario(config.scenario);
  const ConstituentBank bank(scenario, config.constituent);
  if (config.sweep) {
    const auto setup = make_setup(scenario, bank, scenario.held_in, config.merge_seed);
    out.sweeps = sweep_methods(setup, config.methods);
    out.sweep_csv = bench::sweep_csv(out.sweeps);
  }
  if (config.scaling) {
    out.scaling = scaling_experiment(scenario, bank, config.methods, config.scaling_options(threads));
    out.scaling_csv = bench::scaling_csv(out.scaling);
  }
  out.manifest = to_json(config);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

// sweep.csv, scaling.csv (when run) and manifest.json under `dir`.
inline void write_bench_outputs(const BenchOutputs& out, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  if (!out.sweep_csv.empty()) write_text(dir / "sweep.csv", out.sweep_csv);
  if (!out.scaling_csv.empty()) write_text(dir / "scaling.csv", out.scaling_csv);
  write_text(dir / "manifest.json", out.manifest.dump(2) + "\n");
}

}  // namespace mergebench::bench

#endif  // MERGEBENCH_BENCH_REPORT_HPP
