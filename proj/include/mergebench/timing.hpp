// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Wall-clock timing of per-layer merges. All inputs are loaded first, global
// pre-passes (inner products, trim cutoffs) run once outside the timed region,
// then every block is merged R times on the calling thread.

#ifndef MERGEBENCH_TIMING_HPP
#define MERGEBENCH_TIMING_HPP

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "mergebench/merge.hpp"

namespace mergebench {

namespace detail {

inline Tensor stat_tensor(const TensorMap& stats, std::string_view prefix, const std::string& name) {
  const auto key = std::string(prefix) + name;
  auto it = stats.find(key);
  if (it == stats.end()) throw PrerequisiteError("statistics lack '" + key + "'");
  return it->second;
}

}  // namespace detail

// LoadedBlocks for every tensor of in-memory inputs, in manifest order.
inline std::vector<LoadedBlock> load_blocks(const MergeConfig& cfg, const MergeInputs& in) {
  if (in.constituents.empty()) throw ConfigError("merge: at least one constituent is required");
  const auto& first = in.constituents.front();
  for (const auto& m : in.constituents) detail::require_aligned(first, m, "constituent");
  if (in.base) detail::require_aligned(first, *in.base, "base");
  std::vector<LoadedBlock> blocks;
  for (const auto& [name, t] : first) {
    LoadedBlock b;
    b.name = name;
    b.shape = t.shape;
    for (const auto& m : in.constituents) b.models.push_back(m.at(name));
    if (in.base) b.base = in.base->at(name);
    for (const auto& s : in.statistics) {
      switch (cfg.method) {
        case Method::fisher: b.fisher.push_back(detail::stat_tensor(s, kFisherPrefix, name)); break;
        case Method::ties: b.trim.push_back(detail::stat_tensor(s, kTrimPrefix, name)); break;
        case Method::regmean:
        case Method::mats:
          if (cfg.is_linear(name)) b.gram.push_back(detail::stat_tensor(s, kGramPrefix, name));
          break;
        default: break;
      }
    }
    blocks.push_back(std::move(b));
  }
  return blocks;
}

// BlockMerger with its global context installed from in-memory inputs.
inline BlockMerger prepare_merger(const MergeConfig& cfg, const MergeInputs& in) {
  BlockMerger merger(cfg, in.constituents.size());
  if (merger.needs_inner_products()) merger.set_inner_products(model_inner_products(in.constituents));
  if (cfg.method == Method::ties && in.statistics.empty()) {
    if (!in.base) throw PrerequisiteError("ties: base (pretrained) model required");
    std::vector<TrimCutoff> cutoffs;
    for (const auto& m : in.constituents) cutoffs.push_back(find_trim_cutoff(compute_task_vector(m, *in.base), cfg.hp.k_fraction));
    merger.set_trim_cutoffs(std::move(cutoffs));
  }
  return merger;
}

struct TimedMerge {
  cost::CostReport report;  // layers carry timing
  TensorMap merged;
};

// Runs each block merge `repeats` times. Fails if any repeat produces
// different values than the first.
inline TimedMerge time_merge(const MergeRecipe& recipe, int repeats) {
  if (repeats < 2) throw ConfigError("time: repeats must be at least 2");
  recipe.validate();
  const MergeInputs in = load_inputs(recipe);
  const MergeConfig cfg = config_of(recipe);
  const auto blocks = load_blocks(cfg, in);
  const BlockMerger merger = prepare_merger(cfg, in);

  std::vector<TensorMeta> manifest;
  for (const auto& b : blocks) manifest.push_back({b.name, b.shape, 0, "f32"});
  TimedMerge out;
  out.report = recipe_cost_report(recipe, manifest);

  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    std::vector<double> seconds;
    std::vector<float> first;
    for (int r = 0; r < repeats; ++r) {
      const auto start = clock::now();
      auto result = merger.merge(blocks[i]);
      const auto stop = clock::now();
      seconds.push_back(std::chrono::duration<double>(stop - start).count());
      if (r == 0) {
        first = std::move(result.values);
      } else if (result.values != first) {
        throw NumericError("time: repeated merges of '" + blocks[i].name + "' disagree");
      }
    }
    double mean = 0.0;
    for (double s : seconds) mean += s;
    mean /= repeats;
    double ss = 0.0;
    for (double s : seconds) ss += (s - mean) * (s - mean);
    out.report.layers[i].timing = cost::Timing{repeats, mean, std::sqrt(ss / (repeats - 1))};
    out.merged.emplace(blocks[i].name, Tensor(blocks[i].shape, std::move(first)));
  }
  return out;
}

}  // namespace mergebench

#endif  // MERGEBENCH_TIMING_HPP
