// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Constituent training, hyperparameter sweeps and the nested-sample scaling
// experiment on a Scenario.

#ifndef MERGEBENCH_BENCH_HARNESS_HPP
#define MERGEBENCH_BENCH_HARNESS_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mergebench/bench/scenario.hpp"
#include "mergebench/merge.hpp"
#include "mergebench/parallel.hpp"
#include "mergebench/statistics.hpp"

namespace mergebench::bench {

// ---------------------------------------------------------------------------
// Constituents

struct ConstituentOptions {
  double k_fraction = 0.2;  // trim statistic
  int fisher_samples = 4;
};

struct Constituent {
  Cell cell;
  TensorMap model;
  TensorMap statistics;  // fisher/, gram/ and trim/ tensors
};

// Ridge fit on the cell's training split; statistics come from its validation split.
inline Constituent train_constituent(const Scenario& s, const Cell& cell, double alpha,
                                     const ConstituentOptions& options = {}) {
  const auto& data = s.data(cell);
  Constituent out;
  out.cell = cell;
  out.model = fit_ridge(data.train.x, data.train.y, alpha, s.base);

  stats::ToyModel toy = stats::ToyModel::from_tensors(out.model, {"linear"});
  stats::Dataset validation{data.validation.x, data.validation.y, {}};
  stats::StatisticsOptions so;
  so.base = &s.base;
  so.k_fraction = options.k_fraction;
  so.fisher_options.samples = options.fisher_samples;
  so.fisher_options.seed = rng::stream_key(s.config.seed, "fisher", static_cast<std::uint64_t>(cell.task * s.config.domains + cell.domain));
  out.statistics = stats::build_statistics(toy, validation, so);
  return out;
}

class ConstituentBank {
 public:
  ConstituentBank(const Scenario& s, const ConstituentOptions& options = {}) {
    for (const auto& c : s.held_in) bank_.emplace(c, train_constituent(s, c, s.config.ridge, options));
  }

  const Constituent& at(const Cell& c) const {
    auto it = bank_.find(c);
    if (it == bank_.end()) throw ConfigError("no constituent trained for cell " + to_string(c));
    return it->second;
  }

 private:
  std::map<Cell, Constituent> bank_;
};

// ---------------------------------------------------------------------------
// Grids

struct GridAxis {
  std::string hyperparameter;
  std::vector<double> values;
};

// Index reported for methods without hyperparameters.
inline constexpr int kDefaultIndex = 5;

namespace detail {

inline std::vector<double> tenths(int from, int to) {
  std::vector<double> out;
  for (int i = from; i <= to; ++i) out.push_back(i / 10.0);
  return out;
}

}  // namespace detail

inline std::optional<GridAxis> sweep_grid(Method m) {
  switch (m) {
    case Method::task_arithmetic:
    case Method::ties: return GridAxis{"lambda", detail::tenths(1, 10)};
    case Method::dare: return GridAxis{"p", detail::tenths(0, 9)};
    case Method::regmean: return GridAxis{"lambda_offdiag", detail::tenths(0, 10)};
    case Method::mats: {
      GridAxis axis{"cg_iterations", {}};
      for (int n = 10; n <= 100; n += 10) axis.values.push_back(n);
      return axis;
    }
    default: return std::nullopt;
  }
}

inline void set_hyperparameter(Hyperparameters& hp, Method m, double value) {
  switch (m) {
    case Method::task_arithmetic:
    case Method::ties: hp.lambda = value; break;
    case Method::dare: hp.dropout = value; break;
    case Method::regmean: hp.lambda_offdiag = value; break;
    case Method::mats: hp.cg_iterations = static_cast<int>(value); break;
    default: break;
  }
}

// ---------------------------------------------------------------------------
// Merging a sample of constituents

struct SampleSetup {
  const Scenario* scenario = nullptr;
  const ConstituentBank* bank = nullptr;
  std::vector<Cell> sample;  // held-in cells whose constituents are merged
  std::vector<Cell> generalization;
  std::uint64_t merge_seed = 0;  // DARE
};

// Off-diagonal cells whose task appears in the sample.
inline std::vector<Cell> applicable_generalization(const Scenario& s, const std::vector<Cell>& sample) {
  std::set<int> tasks;
  for (const auto& c : sample) tasks.insert(c.task);
  std::vector<Cell> out;
  for (const auto& c : s.generalization) {
    if (tasks.contains(c.task)) out.push_back(c);
  }
  return out;
}

inline SampleSetup make_setup(const Scenario& s, const ConstituentBank& bank, std::vector<Cell> sample,
                              std::uint64_t merge_seed = 0) {
  SampleSetup setup{&s, &bank, std::move(sample), {}, merge_seed};
  setup.generalization = applicable_generalization(s, setup.sample);
  return setup;
}

inline TensorMap merge_sample(const SampleSetup& setup, Method method, const Hyperparameters& hp) {
  MergeInputs in;
  for (const auto& c : setup.sample) in.constituents.push_back(setup.bank->at(c).model);
  if (needs_base(method)) in.base = setup.scenario->base;
  if (needs_statistics(method)) {
    for (const auto& c : setup.sample) in.statistics.push_back(setup.bank->at(c).statistics);
  }
  MergeConfig cfg{method, hp, {kWeightName}};
  cfg.hp.seed = setup.merge_seed;
  if (method == Method::slerp && in.constituents.size() > 2) cfg.method = Method::mlerp;
  if (method == Method::slerp && in.constituents.size() == 1) cfg.method = Method::average;
  return merge_models(cfg, in);
}

struct Scores {
  double validation = 0.0;  // held-in, validation split
  double held_in = 0.0;  // held-in, test split
  double generalization = 0.0;  // test split; 0 when no cell applies
};

inline Scores score(const SampleSetup& setup, const TensorMap& model) {
  Scores out;
  out.validation = evaluate(model, *setup.scenario, setup.sample, SplitKind::validation);
  out.held_in = evaluate(model, *setup.scenario, setup.sample, SplitKind::test);
  if (!setup.generalization.empty()) out.generalization = evaluate(model, *setup.scenario, setup.generalization);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPoint {
  int index = kDefaultIndex;
  std::optional<double> value;
  Scores scores;
};

struct SweepResult {
  Method method = Method::average;
  std::string hyperparameter;  // empty when the method has none
  std::vector<SweepPoint> curve;
  std::size_t best = 0;  // position in curve
  Hyperparameters chosen;
};

// Position of the highest validation score; the lowest position wins ties.
inline std::size_t best_index(const std::vector<SweepPoint>& curve) {
  if (curve.empty()) throw ConfigError("sweep: empty curve");
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (curve[i].scores.validation > curve[best].scores.validation) best = i;
  }
  return best;
}

// Evaluates every grid point; the best point maximizes held-in validation
// score, ties going to the lowest index.
inline SweepResult sweep(const SampleSetup& setup, Method method, Hyperparameters hp = {}) {
  SweepResult out;
  out.method = method;
  const auto axis = sweep_grid(method);
  if (!axis) {
    out.curve.push_back({kDefaultIndex, std::nullopt, score(setup, merge_sample(setup, method, hp))});
    out.chosen = hp;
    return out;
  }
  out.hyperparameter = axis->hyperparameter;
  for (std::size_t i = 0; i < axis->values.size(); ++i) {
    Hyperparameters point = hp;
    set_hyperparameter(point, method, axis->values[i]);
    out.curve.push_back({static_cast<int>(i), axis->values[i], score(setup, merge_sample(setup, method, point))});
  }
  out.best = best_index(out.curve);
  out.chosen = hp;
  set_hyperparameter(out.chosen, method, axis->values[out.best]);
  return out;
}

// Sweeps each method in order. DARE and MaTS take their lambda from the task
// arithmetic sweep, which runs first (and is reported only if requested).
inline std::vector<SweepResult> sweep_methods(const SampleSetup& setup, const std::vector<Method>& methods) {
  std::optional<SweepResult> ta;
  auto ta_lambda = [&] {
    if (!ta) ta = sweep(setup, Method::task_arithmetic);
    return ta->chosen.lambda;
  };
  std::vector<SweepResult> out;
  for (auto m : methods) {
    Hyperparameters hp;
    if (m == Method::task_arithmetic) {
      ta_lambda();
      out.push_back(*ta);
      continue;
    }
    if (m == Method::dare || m == Method::mats) hp.lambda = ta_lambda();
    out.push_back(sweep(setup, m, hp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaling

// A random ordering of held-in cells; the sample of size m is its first m
// entries, so every sample extends the previous one by exactly one cell.
struct SampleChain {
  std::vector<Cell> order;

  std::vector<Cell> subset(int m) const {
    if (m < 1 || m > static_cast<int>(order.size())) throw ConfigError("sample size out of range");
    return {order.begin(), order.begin() + m};
  }
};

inline std::vector<SampleChain> sample_chains(const std::vector<Cell>& held_in, int m_max, int repeats,
                                              std::uint64_t seed) {
  if (m_max > static_cast<int>(held_in.size())) {
    throw ConfigError("M = " + std::to_string(m_max) + " exceeds the " + std::to_string(held_in.size()) +
                      " available held-in tasks");
  }
  if (repeats < 1) throw ConfigError("repeats must be at least 1");
  std::vector<SampleChain> out;
  for (int r = 0; r < repeats; ++r) {
    auto engine = rng::make_stream(seed, "chain", static_cast<std::uint64_t>(r));
    std::vector<Cell> order = held_in;
    rng::shuffle(order, engine);
    order.resize(static_cast<std::size_t>(m_max));
    out.push_back({std::move(order)});
  }
  return out;
}

struct ScalingOptions {
  int m_min = 2;
  int m_max = 4;
  int repeats = 10;
  std::uint64_t chain_seed = 0;
  std::uint64_t merge_seed = 0;
  bool references = false;  // add "pretrained" and "multitask" rows
  unsigned threads = 1;
};

struct ScalingRow {
  int m = 0;
  std::string method;
  double held_in = 0.0;  // mean over chains
  double generalization = 0.0;
};

// For each M and chain, sweeps every method on the chain's sample of size M and
// evaluates the chosen merge. Rows are ordered by M, then method order, then
// references. Chains run in parallel; results are reduced in chain order.
inline std::vector<ScalingRow> scaling_experiment(const Scenario& s, const ConstituentBank& bank,
                                                  const std::vector<Method>& methods, const ScalingOptions& o) {
  if (o.m_min < 1 || o.m_min > o.m_max) throw ConfigError("scaling: need 1 <= m_min <= m_max");
  const auto chains = sample_chains(s.held_in, o.m_max, o.repeats, o.chain_seed);
  std::vector<std::string> labels;
  for (auto m : methods) labels.emplace_back(to_string(m));
  if (o.references) {
    labels.emplace_back("pretrained");
    labels.emplace_back("multitask");
  }
  const std::size_t sizes = static_cast<std::size_t>(o.m_max - o.m_min + 1);
  // per chain: [size][label] -> (held-in, generalization)
  std::vector<std::vector<std::pair<double, double>>> per_chain(chains.size());
  parallel_for(chains.size(), o.threads, [&](std::size_t r) {
    auto& slot = per_chain[r];
    for (int m = o.m_min; m <= o.m_max; ++m) {
      const auto setup = make_setup(s, bank, chains[r].subset(m), o.merge_seed);
      for (const auto& result : sweep_methods(setup, methods)) {
        const auto& best = result.curve[result.best].scores;
        slot.emplace_back(best.held_in, best.generalization);
      }
      if (o.references) {
        for (const auto& model : {s.base, multitask_model(s, setup.sample)}) {
          const auto sc = score(setup, model);
          slot.emplace_back(sc.held_in, sc.generalization);
        }
      }
    }
  });
  std::vector<ScalingRow> rows;
  for (std::size_t i = 0; i < sizes; ++i) {
    for (std::size_t l = 0; l < labels.size(); ++l) {
      ScalingRow row{o.m_min + static_cast<int>(i), labels[l], 0.0, 0.0};
      for (const auto& slot : per_chain) {
        row.held_in += slot[i * labels.size() + l].first;
        row.generalization += slot[i * labels.size() + l].second;
      }
      row.held_in /= static_cast<double>(chains.size());
      row.generalization /= static_cast<double>(chains.size());
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - mean) * (rb[i] - mean);
    da += (ra[i] - mean) * (ra[i] - mean);
    db += (rb[i] - mean) * (rb[i] - mean);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace mergebench::bench

#endif  // MERGEBENCH_BENCH_HARNESS_HPP
