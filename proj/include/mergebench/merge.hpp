// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Recipe-level merging. Two routes produce bit-identical results:
//
//  * merge_models() works on fully loaded TensorMaps through the model-level
//    functions of methods.hpp. It is the reference and what the benchmark uses.
//  * run_merge() streams one parameter block at a time from containers on disk
//    and writes the output container incrementally. SLERP/MLERP need the global
//    inner products first, and TIES without precomputed trim masks needs each
//    constituent's trim cutoff, so those run a pre-pass.

#ifndef MERGEBENCH_MERGE_HPP
#define MERGEBENCH_MERGE_HPP

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mergebench/checkpoint.hpp"
#include "mergebench/cost_model.hpp"
#include "mergebench/errors.hpp"
#include "mergebench/methods.hpp"
#include "mergebench/parallel.hpp"
#include "mergebench/recipe.hpp"

namespace mergebench {

struct MergeConfig {
  Method method = Method::average;
  Hyperparameters hp;
  std::vector<std::string> linear_layers;

  bool is_linear(std::string_view name) const {
    return std::find(linear_layers.begin(), linear_layers.end(), name) != linear_layers.end();
  }
};

inline MergeConfig config_of(const MergeRecipe& r) { return {r.effective_method(), r.hp, r.linear_layers}; }

// Tensors under `prefix` with the prefix stripped ("fisher/w" -> "w").
inline TensorMap statistics_section(const TensorMap& stats, std::string_view prefix) {
  TensorMap out;
  for (auto it = stats.lower_bound(prefix); it != stats.end() && it->first.starts_with(prefix); ++it) {
    out.emplace(it->first.substr(prefix.size()), it->second);
  }
  return out;
}

struct MergeInputs {
  std::vector<TensorMap> constituents;
  std::optional<TensorMap> base;
  std::vector<TensorMap> statistics;  // one per constituent, reserved-prefix names
};

namespace detail {

inline void require_base(const MergeInputs& in, Method m) {
  if (!in.base) throw PrerequisiteError(std::string(to_string(m)) + ": base (pretrained) model required");
}

inline void require_stats(const MergeInputs& in, Method m) {
  if (in.statistics.size() != in.constituents.size()) {
    throw PrerequisiteError(std::string(to_string(m)) + ": statistics required (one set per constituent)");
  }
}

inline std::vector<TaskVector> task_vectors(const MergeInputs& in) {
  std::vector<TaskVector> out;
  out.reserve(in.constituents.size());
  for (const auto& m : in.constituents) out.push_back(compute_task_vector(m, *in.base));
  return out;
}

inline std::vector<GramSet> gram_sets(const MergeInputs& in) {
  std::vector<GramSet> out;
  for (const auto& s : in.statistics) {
    auto section = statistics_section(s, kGramPrefix);
    out.emplace_back(section.begin(), section.end());
  }
  return out;
}

}  // namespace detail

// Whole-model reference merge.
inline TensorMap merge_models(const MergeConfig& cfg, const MergeInputs& in) {
  const auto& models = in.constituents;
  if (models.empty()) throw ConfigError("merge: at least one constituent is required");
  Method method = cfg.method;
  if (method == Method::slerp && models.size() > 2) method = Method::mlerp;
  switch (method) {
    case Method::average: return merge_average(models);
    case Method::slerp:
      if (models.size() != 2) throw ConfigError("slerp needs two constituents");
      return merge_slerp(models[0], models[1], cfg.hp.slerp_t);
    case Method::mlerp: return merge_mlerp(models);
    case Method::task_arithmetic: {
      detail::require_base(in, method);
      return merge_task_arithmetic(*in.base, detail::task_vectors(in), cfg.hp.lambda);
    }
    case Method::dare: {
      detail::require_base(in, method);
      auto tvs = detail::task_vectors(in);
      for (std::size_t i = 0; i < tvs.size(); ++i) tvs[i] = apply_dare(tvs[i], cfg.hp.dropout, cfg.hp.seed, i);
      return merge_task_arithmetic(*in.base, tvs, cfg.hp.lambda);
    }
    case Method::ties: {
      detail::require_base(in, method);
      const auto tvs = detail::task_vectors(in);
      std::vector<TrimmedTaskVector> trimmed;
      for (std::size_t i = 0; i < tvs.size(); ++i) {
        if (in.statistics.empty()) {
          trimmed.push_back(compute_trim_statistic(tvs[i], cfg.hp.k_fraction));
          continue;
        }
        const auto masks = statistics_section(in.statistics.at(i), kTrimPrefix);
        TrimmedTaskVector t;
        t.k_fraction = cfg.hp.k_fraction;
        t.values = tvs[i];
        for (auto& [name, tensor] : t.values) {
          auto it = masks.find(name);
          if (it == masks.end()) throw PrerequisiteError("ties: trim mask for '" + name + "' missing from statistics");
          apply_mask_inplace<float>(tensor.values, it->second.values);
        }
        trimmed.push_back(std::move(t));
      }
      return merge_ties(*in.base, trimmed, cfg.hp.lambda);
    }
    case Method::fisher: {
      detail::require_stats(in, method);
      std::vector<TensorMap> fishers;
      for (const auto& s : in.statistics) fishers.push_back(statistics_section(s, kFisherPrefix));
      return merge_fisher(models, fishers);
    }
    case Method::regmean: {
      detail::require_stats(in, method);
      return merge_regmean(models, detail::gram_sets(in), cfg.hp.lambda_offdiag, cfg.linear_layers);
    }
    case Method::mats: {
      detail::require_base(in, method);
      detail::require_stats(in, method);
      const auto init = merge_task_arithmetic(*in.base, detail::task_vectors(in), cfg.hp.lambda);
      return merge_mats(models, detail::gram_sets(in), cfg.hp.cg_iterations, init, cfg.hp.lambda_offdiag,
                        cfg.linear_layers);
    }
  }
  throw ConfigError("merge: unsupported method");
}

// Everything one block merge needs, materialized.
struct LoadedBlock {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<Tensor> models;
  std::optional<Tensor> base;
  std::vector<Tensor> fisher;  // per constituent, when the method uses them
  std::vector<Tensor> gram;
  std::vector<Tensor> trim;
};

struct BlockOutcome {
  std::vector<float> values;
  std::optional<std::string> warning;
};

namespace detail {

inline FloatSpans spans_of(const std::vector<Tensor>& tensors) {
  FloatSpans out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.emplace_back(t.values);
  return out;
}

}  // namespace detail

// Per-block dispatch shared by the streaming driver and the timing harness.
// merge() is const and may be called concurrently once the global context
// (inner products, trim cutoffs) has been installed.
class BlockMerger {
 public:
  BlockMerger(MergeConfig cfg, std::size_t models) : cfg_(std::move(cfg)), models_(models) {}

  const MergeConfig& config() const { return cfg_; }
  bool needs_inner_products() const { return cfg_.method == Method::slerp || cfg_.method == Method::mlerp; }

  void set_inner_products(const InnerProducts& ip) {
    if (cfg_.method == Method::slerp) slerp_ = slerp_coefficients(ip, cfg_.hp.slerp_t);
    if (cfg_.method == Method::mlerp) mlerp_ = mlerp_scale(ip);
  }

  void set_trim_cutoffs(std::vector<TrimCutoff> cutoffs) { cutoffs_ = std::move(cutoffs); }

  BlockOutcome merge(const LoadedBlock& block) const {
    if (block.models.size() != models_) throw ShapeError("block '" + block.name + "' has the wrong constituent count");
    const auto models = detail::spans_of(block.models);
    const std::span<const float> base = block.base ? std::span<const float>(block.base->values) : std::span<const float>();
    const auto& hp = cfg_.hp;
    BlockOutcome out;
    switch (cfg_.method) {
      case Method::average: out.values = average_block(models); break;
      case Method::slerp:
        if (!slerp_) throw ConfigError("slerp: inner products were not computed");
        out.values = slerp_block(models.at(0), models.at(1), *slerp_);
        break;
      case Method::mlerp:
        if (!mlerp_) throw ConfigError("mlerp: inner products were not computed");
        out.values = mlerp_block(models, *mlerp_);
        break;
      case Method::task_arithmetic: out.values = task_arithmetic_block(base, models, hp.lambda); break;
      case Method::dare: out.values = dare_block(block.name, base, models, hp.lambda, hp.dropout, hp.seed); break;
      case Method::ties: out.values = ties(block, base, models); break;
      case Method::fisher: out.values = fisher_block(models, detail::spans_of(block.fisher)); break;
      case Method::regmean:
      case Method::mats: out = least_squares(block, base, models); break;
    }
    return out;
  }

 private:
  std::vector<float> ties(const LoadedBlock& block, std::span<const float> base, const FloatSpans& models) const {
    std::vector<std::vector<double>> deltas;
    for (std::size_t i = 0; i < models.size(); ++i) {
      auto delta = task_delta(models[i], base);
      if (!block.trim.empty()) {
        apply_mask_inplace<float>(delta, block.trim.at(i).values);
      } else {
        if (cutoffs_.size() != models.size()) throw ConfigError("ties: trim cutoffs were not computed");
        apply_mask_inplace<std::uint8_t>(delta, trim_mask(block.name, delta, cutoffs_[i]));
      }
      deltas.push_back(std::move(delta));
    }
    return ties_block(base, DeltaSpans(deltas.begin(), deltas.end()), cfg_.hp.lambda);
  }

  BlockOutcome least_squares(const LoadedBlock& block, std::span<const float> base, const FloatSpans& models) const {
    BlockOutcome out;
    if (!cfg_.is_linear(block.name)) {
      out.values = average_block(models);
      return out;
    }
    const auto d = block.shape.at(0);
    const auto k = block.shape.at(1);
    const auto grams = detail::spans_of(block.gram);
    if (cfg_.method == Method::regmean) {
      linalg::SolveReport report;
      out.values = regmean_block(models, grams, d, k, cfg_.hp.lambda_offdiag, &report);
      if (report.ridge_applied) {
        out.warning = "regmean: '" + block.name + "' normal matrix singular, added ridge " + std::to_string(report.ridge);
      }
      return out;
    }
    const auto init = task_arithmetic_block(base, models, cfg_.hp.lambda);
    MatsReport report;
    out.values = mats_block(models, grams, d, k, init, cfg_.hp.cg_iterations, cfg_.hp.lambda_offdiag, &report);
    if (report.negative_curvature) {
      out.warning = "mats: '" + block.name + "' non-positive curvature in CG; kept the last good iterate";
    }
    return out;
  }

  MergeConfig cfg_;
  std::size_t models_;
  std::optional<SlerpCoefficients> slerp_;
  std::optional<MlerpScale> mlerp_;
  std::vector<TrimCutoff> cutoffs_;
};

struct RunOptions {
  unsigned threads = 1;
  bool strict_finite = false;
  std::ostream* log = nullptr;  // warnings, one per line
};

struct MergeResult {
  std::filesystem::path output;
  cost::CostReport cost;
  std::vector<std::string> warnings;
};

namespace detail {

// Open readers over all recipe inputs with the up-front checks of a merge.
class RecipeSources {
 public:
  explicit RecipeSources(const MergeRecipe& recipe) : cfg_(config_of(recipe)), stream_(recipe.constituents) {
    const auto& manifest = stream_.manifest();
    if (recipe.base && (needs_base(recipe.method))) {
      base_.emplace(*recipe.base);
      require_same_manifest(manifest, base_->manifest(), "base '" + recipe.base->string() + "'");
    }
    for (const auto& name : cfg_.linear_layers) {
      auto it = std::find_if(manifest.begin(), manifest.end(), [&](const TensorMeta& m) { return m.name == name; });
      if (it == manifest.end()) throw ConfigError("linear layer '" + name + "' is not in the constituents");
      if (it->shape.size() != 2) throw ShapeError("linear layer '" + name + "' must be a 2-D [d, k] tensor");
    }
    const bool uses_stats = needs_statistics(cfg_.method) || cfg_.method == Method::ties;
    if (uses_stats) {
      for (const auto& p : recipe.statistics) stats_.emplace_back(p);
    }
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      for (const auto& meta : manifest) {
        for (const auto& key : stat_keys(meta)) {
          if (!stats_[i].contains(key)) {
            throw PrerequisiteError(std::string(to_string(cfg_.method)) + ": statistics '" +
                                    recipe.statistics[i].string() + "' lack '" + key + "'");
          }
        }
      }
    }
  }

  const MergeConfig& config() const { return cfg_; }
  BlockStream& stream() { return stream_; }
  const std::vector<TensorMeta>& manifest() const { return stream_.manifest(); }
  bool has_trim_statistics() const { return cfg_.method == Method::ties && !stats_.empty(); }

  std::optional<LoadedBlock> next() {
    auto block = stream_.next();
    if (!block) return std::nullopt;
    LoadedBlock out;
    out.name = block->name;
    out.shape = block->tensors.front().shape;
    out.models = std::move(block->tensors);
    if (base_) out.base = base_->read(out.name);
    for (auto& reader : stats_) {
      switch (cfg_.method) {
        case Method::fisher: out.fisher.push_back(reader.read(std::string(kFisherPrefix) + out.name)); break;
        case Method::ties: out.trim.push_back(reader.read(std::string(kTrimPrefix) + out.name)); break;
        case Method::regmean:
        case Method::mats:
          if (cfg_.is_linear(out.name)) out.gram.push_back(reader.read(std::string(kGramPrefix) + out.name));
          break;
        default: break;
      }
    }
    return out;
  }

 private:
  std::vector<std::string> stat_keys(const TensorMeta& meta) const {
    switch (cfg_.method) {
      case Method::fisher: return {std::string(kFisherPrefix) + meta.name};
      case Method::ties: return {std::string(kTrimPrefix) + meta.name};
      case Method::regmean:
      case Method::mats:
        if (cfg_.is_linear(meta.name)) return {std::string(kGramPrefix) + meta.name};
        return {};
      default: return {};
    }
  }

  MergeConfig cfg_;
  BlockStream stream_;
  std::optional<ContainerReader> base_;
  std::vector<ContainerReader> stats_;
};

// One full pass over the constituents: <theta_i, theta_k> in manifest order.
inline InnerProducts streamed_inner_products(const std::vector<std::filesystem::path>& paths) {
  BlockStream stream(paths);
  InnerProducts ip(paths.size());
  while (auto block = stream.next()) ip.accumulate(detail::spans_of(block->tensors));
  return ip;
}

// Trim cutoff of each constituent, computed one constituent at a time.
inline std::vector<TrimCutoff> streamed_trim_cutoffs(const MergeRecipe& recipe) {
  const TensorMap base = read_container(*recipe.base);
  std::vector<TrimCutoff> cutoffs;
  for (const auto& path : recipe.constituents) {
    cutoffs.push_back(find_trim_cutoff(compute_task_vector(read_container(path), base), recipe.hp.k_fraction));
  }
  return cutoffs;
}

}  // namespace detail

inline cost::CostReport recipe_cost_report(const MergeRecipe& recipe, const std::vector<TensorMeta>& manifest) {
  cost::ReportOptions options;
  options.linear_layers = recipe.linear_layers;
  options.k_fraction = recipe.hp.k_fraction;
  if (recipe.effective_method() == Method::mats) options.cg_iterations = static_cast<std::uint64_t>(recipe.hp.cg_iterations);
  return cost::cost_report(recipe.effective_method(), manifest, recipe.constituents.size(), options);
}

// Streaming merge of a recipe into the container at `output`. Blocks are merged
// in batches of `threads` and always written in manifest order.
inline MergeResult run_merge(const MergeRecipe& recipe, const std::filesystem::path& output,
                             const RunOptions& options = {}) {
  recipe.validate();
  detail::RecipeSources sources(recipe);
  BlockMerger merger(sources.config(), recipe.constituents.size());
  if (merger.needs_inner_products()) merger.set_inner_products(detail::streamed_inner_products(recipe.constituents));
  if (sources.config().method == Method::ties && !sources.has_trim_statistics()) {
    merger.set_trim_cutoffs(detail::streamed_trim_cutoffs(recipe));
  }

  std::vector<TensorSpec> specs;
  for (const auto& meta : sources.manifest()) specs.push_back({meta.name, meta.shape});
  ContainerWriter writer(output, std::move(specs), {options.strict_finite});

  MergeResult result;
  result.output = output;
  const unsigned threads = std::max(1u, options.threads);
  for (;;) {
    std::vector<LoadedBlock> batch;
    while (batch.size() < threads) {
      auto block = sources.next();
      if (!block) break;
      batch.push_back(std::move(*block));
    }
    if (batch.empty()) break;
    std::vector<BlockOutcome> outcomes(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) { outcomes[i] = merger.merge(batch[i]); });
    for (std::size_t i = 0; i < batch.size(); ++i) {
      writer.write(batch[i].name, outcomes[i].values);
      if (outcomes[i].warning) {
        if (options.log) *options.log << "warning: " << *outcomes[i].warning << '\n';
        result.warnings.push_back(std::move(*outcomes[i].warning));
      }
    }
  }
  writer.finish();
  result.cost = recipe_cost_report(recipe, sources.manifest());
  return result;
}

// Loads every recipe input into memory (the counterpart of run_merge's readers).
inline MergeInputs load_inputs(const MergeRecipe& recipe) {
  MergeInputs in;
  for (const auto& p : recipe.constituents) in.constituents.push_back(read_container(p));
  if (recipe.base) in.base = read_container(*recipe.base);
  for (const auto& p : recipe.statistics) in.statistics.push_back(read_container(p));
  return in;
}

}  // namespace mergebench

#endif  // MERGEBENCH_MERGE_HPP
