// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Analytic FLOPs for merging one d x k linear layer across M models, plus the
// one-off cost of the statistics some methods need. Reduction terms written as
// log(x) are evaluated as ceil(log2(x)).
//
//   method           merging                                   statistics
//   average          M dk                                      -
//   task_arithmetic  (2M+1) dk                                 -
//   dare             (6M+1) dk                                 -
//   ties             (4M+1) dk                                 M K dk + M dk log K
//   fisher           (3M-1) dk                                 4 M T d^2 k
//   regmean          (M+2) d^2 k + (3M-2) dk                   M T d^2 k
//   mats             (M+N) d^2 k + (2M+5N-2) dk                4 M T d^2 k
//   slerp            (5M-2) dk + (M+1) log(dk)                 -
//   mlerp            (2M+3) dk + (M+1) log(dk) + log M         -
//
// The solve inside RegMean is counted as d^2 k even though the implementation
// factorizes; the model reports this accounting, not measured arithmetic.

#ifndef MERGEBENCH_COST_MODEL_HPP
#define MERGEBENCH_COST_MODEL_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergebench/checkpoint.hpp"
#include "mergebench/errors.hpp"
#include "mergebench/recipe.hpp"

namespace mergebench::cost {

using Flops = std::uint64_t;

struct LayerDims {
  std::uint64_t d = 1;  // input dimension
  std::uint64_t k = 1;  // output dimension
  std::uint64_t M = 1;  // models merged
  std::optional<std::uint64_t> N;  // CG iterations (MaTS)
  std::optional<std::uint64_t> K;  // retained parameters (TIES statistics)
  std::optional<std::uint64_t> T;  // tokens seen while computing statistics
};

// ceil(log2(x)) for x >= 1; 0 at x = 1.
inline constexpr std::uint64_t ceil_log2(std::uint64_t x) {
  return x <= 1 ? 0 : static_cast<std::uint64_t>(std::bit_width(x - 1));
}

inline bool has_statistics(Method m) {
  return m == Method::ties || m == Method::fisher || m == Method::regmean || m == Method::mats;
}

namespace detail {

inline void require_positive(const LayerDims& dims) {
  if (dims.d == 0 || dims.k == 0 || dims.M == 0) throw ConfigError("cost model: d, k and M must be positive");
}

inline std::uint64_t require(const std::optional<std::uint64_t>& v, const char* dim, Method m) {
  if (!v) throw ConfigError(std::string("cost model: ") + std::string(to_string(m)) + " needs " + dim);
  return *v;
}

}  // namespace detail

inline Flops merging_flops(Method method, const LayerDims& dims) {
  detail::require_positive(dims);
  const Flops M = dims.M;
  const Flops dk = dims.d * dims.k;
  const Flops d2k = dims.d * dk;
  switch (method) {
    case Method::average: return M * dk;
    case Method::task_arithmetic: return (2 * M + 1) * dk;
    case Method::dare: return (6 * M + 1) * dk;
    case Method::ties: return (4 * M + 1) * dk;
    case Method::fisher: return (3 * M - 1) * dk;
    case Method::regmean: return (M + 2) * d2k + (3 * M - 2) * dk;
    case Method::mats: {
      const Flops N = detail::require(dims.N, "N (CG iterations)", method);
      return (M + N) * d2k + (2 * M + 5 * N - 2) * dk;
    }
    case Method::slerp: return (5 * M - 2) * dk + (M + 1) * ceil_log2(dk);
    case Method::mlerp: return (2 * M + 3) * dk + (M + 1) * ceil_log2(dk) + ceil_log2(M);
  }
  throw ConfigError("cost model: unknown method");
}

// Zero for methods that need no statistics.
inline Flops statistics_flops(Method method, const LayerDims& dims) {
  detail::require_positive(dims);
  const Flops M = dims.M;
  const Flops dk = dims.d * dims.k;
  const Flops d2k = dims.d * dk;
  switch (method) {
    case Method::ties: {
      const Flops K = detail::require(dims.K, "K (retained parameters)", method);
      return M * K * dk + M * dk * ceil_log2(K);
    }
    case Method::fisher:
    case Method::mats: return 4 * M * detail::require(dims.T, "T (statistics tokens)", method) * d2k;
    case Method::regmean: return M * detail::require(dims.T, "T (statistics tokens)", method) * d2k;
    default: return 0;
  }
}

struct Timing {
  int repeats = 0;
  double mean_seconds = 0.0;
  double stddev_seconds = 0.0;  // sample standard deviation
};

struct LayerCost {
  std::string name;
  std::uint64_t d = 1;
  std::uint64_t k = 1;
  Flops merging = 0;
  std::optional<Flops> statistics;  // unknown when T (or K) was not supplied
  std::optional<Timing> timing;
};

struct CostReport {
  Method method = Method::average;
  std::uint64_t models = 0;
  std::vector<LayerCost> layers;
  Flops total_merging = 0;
  std::optional<Flops> total_statistics;
};

struct ReportOptions {
  std::vector<std::string> linear_layers;
  std::optional<std::uint64_t> cg_iterations;
  double k_fraction = 0.2;
  std::optional<std::uint64_t> tokens;
};

// One LayerCost per manifest tensor. 2-D tensors are costed as d x k layers,
// anything else as 1 x numel. RegMean and MaTS average every tensor that is not
// a listed linear layer, so those tensors get the averaging cost.
inline CostReport cost_report(Method method, const std::vector<TensorMeta>& manifest, std::uint64_t models,
                              const ReportOptions& options = {}) {
  CostReport report;
  report.method = method;
  report.models = models;
  bool statistics_known = true;
  for (const auto& meta : manifest) {
    LayerCost layer;
    layer.name = meta.name;
    if (meta.shape.size() == 2) {
      layer.d = static_cast<std::uint64_t>(meta.shape[0]);
      layer.k = static_cast<std::uint64_t>(meta.shape[1]);
    } else {
      layer.k = meta.numel();
    }
    const bool linear = std::find(options.linear_layers.begin(), options.linear_layers.end(), meta.name) !=
                        options.linear_layers.end();
    Method costed = method;
    if ((method == Method::regmean || method == Method::mats) && !linear) costed = Method::average;
    LayerDims dims{layer.d, layer.k, models, options.cg_iterations, std::nullopt, options.tokens};
    if (costed == Method::ties) {
      const auto numel = layer.d * layer.k;
      const auto kept = static_cast<std::uint64_t>(std::ceil(options.k_fraction * static_cast<double>(numel)));
      dims.K = std::clamp<std::uint64_t>(kept, 1, numel);
    }
    layer.merging = merging_flops(costed, dims);
    if (!has_statistics(costed)) {
      layer.statistics = 0;
    } else if (costed == Method::ties || options.tokens) {
      layer.statistics = statistics_flops(costed, dims);
    } else {
      statistics_known = false;
    }
    report.total_merging += layer.merging;
    report.layers.push_back(std::move(layer));
  }
  if (statistics_known) {
    Flops total = 0;
    for (const auto& l : report.layers) total += *l.statistics;
    report.total_statistics = total;
  }
  return report;
}

inline nlohmann::json to_json(const CostReport& report) {
  nlohmann::json j;
  j["method"] = std::string(to_string(report.method));
  j["models"] = report.models;
  j["note"] = "analytic per-layer FLOPs; log terms are ceil(log2); statistics are once-per-model costs";
  j["layers"] = nlohmann::json::array();
  for (const auto& l : report.layers) {
    nlohmann::json lj{{"name", l.name}, {"d", l.d}, {"k", l.k}, {"merging_flops", l.merging}};
    lj["statistics_flops"] = l.statistics ? nlohmann::json(*l.statistics) : nlohmann::json(nullptr);
    if (l.timing) {
      lj["timing"] = {{"repeats", l.timing->repeats},
                      {"mean_seconds", l.timing->mean_seconds},
                      {"stddev_seconds", l.timing->stddev_seconds}};
    }
    j["layers"].push_back(std::move(lj));
  }
  j["totals"] = {{"merging_flops", report.total_merging},
                 {"statistics_flops",
                  report.total_statistics ? nlohmann::json(*report.total_statistics) : nlohmann::json(nullptr)}};
  return j;
}

inline std::string to_csv(const CostReport& report) {
  std::ostringstream out;
  out << "layer,d,k,merging_flops,statistics_flops\n";
  for (const auto& l : report.layers) {
    out << l.name << ',' << l.d << ',' << l.k << ',' << l.merging << ',';
    if (l.statistics) out << *l.statistics;
    out << '\n';
  }
  return out.str();
}

struct TableRow {
  Method method;
  std::optional<Flops> merging;     // nullopt when a required dim is missing
  std::optional<Flops> statistics;  // nullopt when a required dim is missing
};

// Order follows the usual presentation: Average ... MaTS, then SLERP and MLERP.
inline std::vector<TableRow> cost_table(const LayerDims& dims) {
  static constexpr Method kOrder[] = {Method::average, Method::task_arithmetic, Method::dare,
                                      Method::ties,    Method::fisher,          Method::regmean,
                                      Method::mats,    Method::slerp,           Method::mlerp};
  std::vector<TableRow> rows;
  for (auto m : kOrder) {
    TableRow row{m, std::nullopt, std::nullopt};
    try {
      row.merging = merging_flops(m, dims);
    } catch (const ConfigError&) {
    }
    try {
      row.statistics = statistics_flops(m, dims);
    } catch (const ConfigError&) {
    }
    rows.push_back(row);
  }
  return rows;
}

// Columns: method,merging_flops,statistics_flops. "-" marks a method without
// statistics, "n/a" a value whose dims were not supplied.
inline std::string table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out << "method,merging_flops,statistics_flops\n";
  for (const auto& row : rows) {
    out << to_string(row.method) << ',';
    if (row.merging) {
      out << *row.merging;
    } else {
      out << "n/a";
    }
    out << ',';
    if (!has_statistics(row.method)) {
      out << '-';
    } else if (row.statistics) {
      out << *row.statistics;
    } else {
      out << "n/a";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace mergebench::cost

#endif  // MERGEBENCH_COST_MODEL_HPP
