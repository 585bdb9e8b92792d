// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0

#ifndef MERGEBENCH_RECIPE_HPP
#define MERGEBENCH_RECIPE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mergebench/errors.hpp"

namespace mergebench {

enum class Method { average, slerp, mlerp, task_arithmetic, dare, ties, fisher, regmean, mats };

inline constexpr std::array<Method, 9> kAllMethods = {Method::average, Method::slerp,   Method::mlerp,
                                                      Method::task_arithmetic, Method::dare, Method::ties,
                                                      Method::fisher,  Method::regmean, Method::mats};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::average: return "average";
    case Method::slerp: return "slerp";
    case Method::mlerp: return "mlerp";
    case Method::task_arithmetic: return "task_arithmetic";
    case Method::dare: return "dare";
    case Method::ties: return "ties";
    case Method::fisher: return "fisher";
    case Method::regmean: return "regmean";
    case Method::mats: return "mats";
  }
  return "unknown";
}

inline std::string method_list() {
  std::string out;
  for (auto m : kAllMethods) {
    if (!out.empty()) out += ", ";
    out += to_string(m);
  }
  return out;
}

inline std::optional<Method> parse_method(std::string_view text) {
  for (auto m : kAllMethods) {
    if (to_string(m) == text) return m;
  }
  if (text == "task_arith" || text == "ta") return Method::task_arithmetic;
  return std::nullopt;
}

inline Method require_method(std::string_view text) {
  if (auto m = parse_method(text)) return *m;
  throw ConfigError("unknown merge method '" + std::string(text) + "' (known: " + method_list() + ")");
}

inline bool needs_base(Method m) {
  return m == Method::task_arithmetic || m == Method::dare || m == Method::ties || m == Method::mats;
}

inline bool needs_statistics(Method m) { return m == Method::fisher || m == Method::regmean || m == Method::mats; }

struct Hyperparameters {
  double lambda = 1.0;          // task-vector scale (task arithmetic, DARE, TIES, MaTS init)
  double dropout = 0.0;         // DARE p
  double k_fraction = 0.2;      // TIES retained fraction
  double lambda_offdiag = 1.0;  // Gram off-diagonal scale (RegMean, MaTS)
  int cg_iterations = 10;       // MaTS N
  std::uint64_t seed = 0;       // DARE streams
  double slerp_t = 0.5;
};

struct MergeRecipe {
  Method method = Method::average;
  std::vector<std::filesystem::path> constituents;
  std::optional<std::filesystem::path> base;
  std::vector<std::filesystem::path> statistics;  // empty, or one per constituent
  Hyperparameters hp;
  std::vector<std::string> linear_layers;

  // SLERP over more than two models runs as MLERP.
  Method effective_method() const {
    if (method == Method::slerp && constituents.size() > 2) return Method::mlerp;
    return method;
  }

  // ConfigError for malformed values, PrerequisiteError for missing inputs.
  void validate() const {
    const auto name = std::string(to_string(method));
    const auto m = constituents.size();
    if (m == 0) throw ConfigError(name + ": at least one constituent is required");
    if (!statistics.empty() && statistics.size() != m) {
      throw ConfigError(name + ": statistics must list one container per constituent (" + std::to_string(m) +
                        "), got " + std::to_string(statistics.size()));
    }
    if (needs_base(method) && !base) {
      throw PrerequisiteError(name + ": base (pretrained) model required to form task vectors");
    }
    if (needs_statistics(method) && statistics.empty()) {
      const char* what = method == Method::fisher ? "diagonal Fisher" : "Gram matrices";
      throw PrerequisiteError(name + ": statistics required (" + what + " per constituent; run `mergebench stats`)");
    }
    switch (method) {
      case Method::slerp:
        if (m < 2) throw ConfigError("slerp needs at least two constituents");
        if (!(hp.slerp_t >= 0.0 && hp.slerp_t <= 1.0)) throw ConfigError("slerp_t must lie in [0, 1]");
        break;
      case Method::mlerp:
        if (m < 3) throw ConfigError("mlerp needs more than two constituents; use slerp for two");
        break;
      case Method::task_arithmetic:
      case Method::dare:
      case Method::ties:
        if (!(hp.lambda > 0.0)) throw ConfigError(name + ": lambda must be positive");
        break;
      default:
        break;
    }
    if (method == Method::dare && !(hp.dropout >= 0.0 && hp.dropout < 1.0)) {
      throw ConfigError("dare: p must lie in [0, 1)");
    }
    if (method == Method::ties && !(hp.k_fraction > 0.0 && hp.k_fraction <= 1.0)) {
      throw ConfigError("ties: k_fraction must lie in (0, 1]");
    }
    if (method == Method::regmean || method == Method::mats) {
      if (linear_layers.empty()) throw ConfigError(name + ": linear_layers must name at least one weight matrix");
      if (!(hp.lambda_offdiag >= 0.0 && hp.lambda_offdiag <= 1.0)) {
        throw ConfigError(name + ": lambda_offdiag must lie in [0, 1]");
      }
    }
    if (method == Method::mats) {
      if (hp.cg_iterations < 1) throw ConfigError("mats: cg_iterations must be at least 1");
      if (!(hp.lambda > 0.0)) throw ConfigError("mats: lambda (task arithmetic init) must be positive");
    }
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw ConfigError("unknown key '" + key + "' in " + std::string(where));
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& dir) {
  return (p.is_absolute() || dir.empty()) ? p : dir / p;
}

}  // namespace detail

// Parses a recipe object. Relative paths are resolved against `dir`.
inline MergeRecipe recipe_from_json(const nlohmann::json& j, const std::filesystem::path& dir = {}) {
  if (!j.is_object()) throw ConfigError("recipe must be a JSON object");
  detail::reject_unknown_keys(j, {"method", "constituents", "base", "statistics", "hyperparameters", "linear_layers"},
                              "recipe");
  MergeRecipe r;
  try {
    if (!j.contains("method")) throw ConfigError("recipe needs a \"method\"");
    r.method = require_method(j.at("method").get<std::string>());
    if (!j.contains("constituents") || !j.at("constituents").is_array()) {
      throw ConfigError("recipe needs a \"constituents\" array");
    }
    for (const auto& p : j.at("constituents")) r.constituents.push_back(detail::resolve(p.get<std::string>(), dir));
    if (j.contains("base") && !j.at("base").is_null()) r.base = detail::resolve(j.at("base").get<std::string>(), dir);
    if (j.contains("statistics")) {
      for (const auto& p : j.at("statistics")) r.statistics.push_back(detail::resolve(p.get<std::string>(), dir));
    }
    if (j.contains("linear_layers")) r.linear_layers = j.at("linear_layers").get<std::vector<std::string>>();
    if (j.contains("hyperparameters")) {
      const auto& h = j.at("hyperparameters");
      if (!h.is_object()) throw ConfigError("\"hyperparameters\" must be an object");
      detail::reject_unknown_keys(h, {"lambda", "p", "k_fraction", "lambda_offdiag", "cg_iterations", "seed", "slerp_t"},
                                  "hyperparameters");
      r.hp.lambda = h.value("lambda", r.hp.lambda);
      r.hp.dropout = h.value("p", r.hp.dropout);
      r.hp.k_fraction = h.value("k_fraction", r.hp.k_fraction);
      r.hp.lambda_offdiag = h.value("lambda_offdiag", r.hp.lambda_offdiag);
      r.hp.cg_iterations = h.value("cg_iterations", r.hp.cg_iterations);
      r.hp.seed = h.value("seed", r.hp.seed);
      r.hp.slerp_t = h.value("slerp_t", r.hp.slerp_t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid recipe: ") + e.what());
  }
  return r;
}

inline nlohmann::json recipe_to_json(const MergeRecipe& r) {
  nlohmann::json j;
  j["method"] = std::string(to_string(r.method));
  j["constituents"] = nlohmann::json::array();
  for (const auto& p : r.constituents) j["constituents"].push_back(p.string());
  j["base"] = r.base ? nlohmann::json(r.base->string()) : nlohmann::json(nullptr);
  j["statistics"] = nlohmann::json::array();
  for (const auto& p : r.statistics) j["statistics"].push_back(p.string());
  j["linear_layers"] = r.linear_layers;
  j["hyperparameters"] = {{"lambda", r.hp.lambda},
                          {"p", r.hp.dropout},
                          {"k_fraction", r.hp.k_fraction},
                          {"lambda_offdiag", r.hp.lambda_offdiag},
                          {"cg_iterations", r.hp.cg_iterations},
                          {"seed", r.hp.seed},
                          {"slerp_t", r.hp.slerp_t}};
  return j;
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

inline MergeRecipe load_recipe(const std::filesystem::path& path) {
  return recipe_from_json(load_json_file(path), path.parent_path());
}

}  // namespace mergebench

#endif  // MERGEBENCH_RECIPE_HPP
