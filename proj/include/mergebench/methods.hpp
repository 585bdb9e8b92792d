// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// The merging methods, written twice over the same kernels:
//
//  * block kernels (`*_block`) take the aligned values of one parameter block
//    from every constituent and return the merged block. They are pure, so the
//    streaming driver can run them in any order or in parallel.
//  * model-level functions take whole TensorMaps / TaskVectors and loop the
//    kernels over tensors in name order.
//
// Arithmetic happens in float64; inputs and outputs are float32. Task vectors
// stay in float64 so that base + (model - base) reproduces the model exactly.

#ifndef MERGEBENCH_METHODS_HPP
#define MERGEBENCH_METHODS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mergebench/checkpoint.hpp"
#include "mergebench/errors.hpp"
#include "mergebench/linalg.hpp"
#include "mergebench/rng.hpp"

namespace mergebench {

using FloatSpans = std::vector<std::span<const float>>;
using DeltaSpans = std::vector<std::span<const double>>;

// Reserved tensor-name prefixes inside statistics containers.
inline constexpr std::string_view kFisherPrefix = "fisher/";
inline constexpr std::string_view kGramPrefix = "gram/";
inline constexpr std::string_view kTrimPrefix = "trim/";

// Below this total Fisher mass an entry falls back to the plain average.
inline constexpr double kFisherEpsilon = 1e-30;
// SLERP switches to linear interpolation when sin(angle) drops below this.
inline constexpr double kSlerpEpsilon = 1e-6;
// CG stops once ||r|| <= kCgRelativeTolerance * ||b||.
inline constexpr double kCgRelativeTolerance = 1e-10;

namespace detail {

template <class Spans>
std::size_t common_size(const Spans& spans, std::string_view what) {
  if (spans.empty()) throw ConfigError(std::string(what) + ": no constituents");
  const std::size_t n = spans.front().size();
  for (const auto& s : spans) {
    if (s.size() != n) throw ShapeError(std::string(what) + ": constituent blocks differ in size");
  }
  return n;
}

inline void require_size(std::size_t got, std::size_t want, std::string_view what) {
  if (got != want) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(want) + " values, got " + std::to_string(got));
  }
}

inline int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Block kernels
// ---------------------------------------------------------------------------

inline std::vector<float> average_block(const FloatSpans& models) {
  const std::size_t n = detail::common_size(models, "average");
  const double count = static_cast<double>(models.size());
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0.0;
    for (const auto& m : models) sum += static_cast<double>(m[j]);
    out[j] = static_cast<float>(sum / count);
  }
  return out;
}

inline std::vector<double> task_delta(std::span<const float> model, std::span<const float> base) {
  detail::require_size(model.size(), base.size(), "task vector");
  std::vector<double> delta(model.size());
  for (std::size_t j = 0; j < delta.size(); ++j) {
    delta[j] = static_cast<double>(model[j]) - static_cast<double>(base[j]);
  }
  return delta;
}

// base + lambda * sum_i deltas_i
inline std::vector<float> apply_task_sum(std::span<const float> base, const DeltaSpans& deltas, double lambda) {
  const std::size_t n = base.size();
  for (const auto& d : deltas) detail::require_size(d.size(), n, "task arithmetic");
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0.0;
    for (const auto& d : deltas) sum += d[j];
    out[j] = static_cast<float>(static_cast<double>(base[j]) + lambda * sum);
  }
  return out;
}

inline std::vector<float> task_arithmetic_block(std::span<const float> base, const FloatSpans& models,
                                                double lambda) {
  detail::common_size(models, "task arithmetic");
  std::vector<std::vector<double>> deltas;
  deltas.reserve(models.size());
  for (const auto& m : models) deltas.push_back(task_delta(m, base));
  return apply_task_sum(base, DeltaSpans(deltas.begin(), deltas.end()), lambda);
}

// One uniform draw per entry, in index order: dropped if u < p, else rescaled
// by 1 / (1 - p).
inline void apply_dare_inplace(std::span<double> delta, double p, rng::Engine& stream) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("DARE dropout probability must lie in [0, 1)");
  const double keep = 1.0 - p;
  for (auto& v : delta) {
    const double u = rng::uniform01(stream);
    v = (u < p) ? 0.0 : v / keep;
  }
}

inline std::vector<float> dare_block(std::string_view name, std::span<const float> base, const FloatSpans& models,
                                     double lambda, double p, std::uint64_t seed) {
  detail::common_size(models, "dare");
  std::vector<std::vector<double>> deltas;
  deltas.reserve(models.size());
  for (std::size_t i = 0; i < models.size(); ++i) {
    auto delta = task_delta(models[i], base);
    auto stream = rng::make_stream(seed, name, i);
    apply_dare_inplace(delta, p, stream);
    deltas.push_back(std::move(delta));
  }
  return apply_task_sum(base, DeltaSpans(deltas.begin(), deltas.end()), lambda);
}

// Elect / disjoint-mean over already trimmed task vectors. Entries whose summed
// sign is zero take the majority elected sign of this block; a tied block
// majority resolves to +1.
inline std::vector<float> ties_block(std::span<const float> base, const DeltaSpans& trimmed, double lambda) {
  const std::size_t n = base.size();
  if (trimmed.empty()) throw ConfigError("ties: no constituents");
  for (const auto& t : trimmed) detail::require_size(t.size(), n, "ties");

  std::vector<int> elected(n);
  long positive = 0;
  long negative = 0;
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0.0;
    for (const auto& t : trimmed) sum += t[j];
    elected[j] = detail::sign_of(sum);
    positive += elected[j] > 0;
    negative += elected[j] < 0;
  }
  const int majority = negative > positive ? -1 : 1;

  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    const int sign = elected[j] != 0 ? elected[j] : majority;
    double sum = 0.0;
    int count = 0;
    for (const auto& t : trimmed) {
      if (detail::sign_of(t[j]) == sign) {
        sum += t[j];
        ++count;
      }
    }
    const double merged = count > 0 ? sum / count : 0.0;
    out[j] = static_cast<float>(static_cast<double>(base[j]) + lambda * merged);
  }
  return out;
}

inline std::vector<float> fisher_block(const FloatSpans& models, const FloatSpans& fishers) {
  const std::size_t n = detail::common_size(models, "fisher");
  if (fishers.size() != models.size()) throw ShapeError("fisher: need one Fisher per constituent");
  for (const auto& f : fishers) detail::require_size(f.size(), n, "fisher");
  const double count = static_cast<double>(models.size());
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double weighted = 0.0;
    double mass = 0.0;
    bool uniform = true;
    for (std::size_t i = 0; i < models.size(); ++i) {
      const double f = fishers[i][j];
      if (f < 0.0 || std::isnan(f)) throw NumericError("fisher: negative or NaN Fisher entry");
      weighted += f * static_cast<double>(models[i][j]);
      mass += f;
      uniform = uniform && fishers[i][j] == fishers[0][j];
    }
    // Equal weights cancel; the plain mean avoids a rounding difference.
    if (mass < kFisherEpsilon || uniform) {
      double sum = 0.0;
      for (const auto& m : models) sum += static_cast<double>(m[j]);
      out[j] = static_cast<float>(sum / count);
    } else {
      out[j] = static_cast<float>(weighted / mass);
    }
  }
  return out;
}

// Pairwise inner products <theta_i, theta_k> over whole flattened models,
// accumulated block by block. Each block's partial sums are formed in index
// order and added to the running totals in the order blocks are fed, so feeding
// blocks in manifest order gives a deterministic result.
class InnerProducts {
 public:
  explicit InnerProducts(std::size_t models) : m_(models), totals_(models * models, 0.0) {}

  static std::vector<double> block_partials(const FloatSpans& block) {
    const std::size_t m = block.size();
    const std::size_t n = detail::common_size(block, "inner products");
    std::vector<double> partial(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = i; k < m; ++k) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += static_cast<double>(block[i][j]) * static_cast<double>(block[k][j]);
        partial[i * m + k] = sum;
        partial[k * m + i] = sum;
      }
    }
    return partial;
  }

  void add(const std::vector<double>& partial) {
    if (partial.size() != totals_.size()) throw ShapeError("inner products: partial size mismatch");
    for (std::size_t i = 0; i < totals_.size(); ++i) totals_[i] += partial[i];
  }

  void accumulate(const FloatSpans& block) { add(block_partials(block)); }

  std::size_t models() const { return m_; }
  double operator()(std::size_t i, std::size_t k) const { return totals_[i * m_ + k]; }
  double norm(std::size_t i) const { return std::sqrt((*this)(i, i)); }

 private:
  std::size_t m_;
  std::vector<double> totals_;
};

struct SlerpCoefficients {
  double weight_a = 1.0;
  double weight_b = 0.0;
  double angle = 0.0;
  bool linear_fallback = false;
};

inline SlerpCoefficients slerp_coefficients(const InnerProducts& ip, double t) {
  if (ip.models() != 2) throw ConfigError("slerp merges exactly two models");
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("slerp interpolation fraction must lie in [0, 1]");
  const double norm_a_sq = ip(0, 0);
  const double norm_b_sq = ip(1, 1);
  if (!(norm_a_sq > 0.0) || !(norm_b_sq > 0.0)) throw NumericError("slerp: zero-norm model");
  const double cosine = std::clamp(ip(0, 1) / std::sqrt(norm_a_sq * norm_b_sq), -1.0, 1.0);
  SlerpCoefficients c;
  c.angle = std::acos(cosine);
  const double sine = std::sin(c.angle);
  if (sine < kSlerpEpsilon) {
    c.weight_a = 1.0 - t;
    c.weight_b = t;
    c.linear_fallback = true;
  } else {
    c.weight_a = std::sin((1.0 - t) * c.angle) / sine;
    c.weight_b = std::sin(t * c.angle) / sine;
  }
  return c;
}

inline std::vector<float> slerp_block(std::span<const float> a, std::span<const float> b,
                                      const SlerpCoefficients& c) {
  detail::require_size(b.size(), a.size(), "slerp");
  std::vector<float> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    out[j] = static_cast<float>(c.weight_a * static_cast<double>(a[j]) + c.weight_b * static_cast<double>(b[j]));
  }
  return out;
}

// MLERP: normalize each model, average, renormalize the average to unit norm,
// then scale by the largest input norm. Folded into
//   out = factor * sum_i theta_i / ||theta_i||,  factor = max_norm / ||sum_i theta_i / ||theta_i||||.
struct MlerpScale {
  std::vector<double> inverse_norms;
  double factor = 1.0;
  double max_norm = 0.0;
};

inline MlerpScale mlerp_scale(const InnerProducts& ip) {
  const std::size_t m = ip.models();
  if (m < 2) throw ConfigError("mlerp needs at least two models");
  MlerpScale s;
  s.inverse_norms.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double n = ip.norm(i);
    if (!(n > 0.0)) throw NumericError("mlerp: zero-norm model " + std::to_string(i));
    s.inverse_norms[i] = 1.0 / n;
    s.max_norm = std::max(s.max_norm, n);
  }
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < m; ++k) sum_sq += ip(i, k) * s.inverse_norms[i] * s.inverse_norms[k];
  }
  // sum_sq = M^2 * ||mean of unit models||^2
  const double mean_norm = std::sqrt(std::max(sum_sq, 0.0)) / static_cast<double>(m);
  if (mean_norm < 1e-9) throw NumericError("mlerp: the normalized models average to zero");
  s.factor = s.max_norm / std::sqrt(sum_sq);
  return s;
}

inline std::vector<float> mlerp_block(const FloatSpans& models, const MlerpScale& s) {
  const std::size_t n = detail::common_size(models, "mlerp");
  if (s.inverse_norms.size() != models.size()) throw ShapeError("mlerp: scale computed for a different model count");
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < models.size(); ++i) sum += static_cast<double>(models[i][j]) * s.inverse_norms[i];
    out[j] = static_cast<float>(s.factor * sum);
  }
  return out;
}

// G with every off-diagonal entry multiplied by lambda.
inline linalg::Matrix scale_offdiagonal(const linalg::Matrix& gram, double lambda) {
  linalg::Matrix scaled = lambda * gram;
  scaled.diagonal() = gram.diagonal();
  return scaled;
}

struct NormalEquations {
  linalg::Matrix lhs;  // sum_i G~_i          (d x d)
  linalg::Matrix rhs;  // sum_i G~_i W_i      (d x k)
};

inline NormalEquations build_normal_equations(const FloatSpans& weights, const FloatSpans& grams, std::int64_t d,
                                              std::int64_t k, double lambda_offdiag) {
  if (weights.empty()) throw ConfigError("regmean: no constituents");
  if (grams.size() != weights.size()) throw ShapeError("regmean: need one Gram matrix per constituent");
  if (!(lambda_offdiag >= 0.0 && lambda_offdiag <= 1.0)) {
    throw ConfigError("Gram off-diagonal scale must lie in [0, 1]");
  }
  NormalEquations eq{linalg::Matrix::Zero(d, d), linalg::Matrix::Zero(d, k)};
  for (std::size_t i = 0; i < weights.size(); ++i) {
    detail::require_size(weights[i].size(), static_cast<std::size_t>(d * k), "regmean weight");
    detail::require_size(grams[i].size(), static_cast<std::size_t>(d * d), "regmean Gram");
    const linalg::Matrix gram = linalg::to_matrix(grams[i], d, d);
    if (!linalg::is_symmetric(gram)) throw NumericError("regmean: Gram matrix " + std::to_string(i) + " is not symmetric");
    const linalg::Matrix scaled = scale_offdiagonal(gram, lambda_offdiag);
    eq.lhs += scaled;
    eq.rhs += scaled * linalg::to_matrix(weights[i], d, k);
  }
  return eq;
}

inline std::vector<float> regmean_block(const FloatSpans& weights, const FloatSpans& grams, std::int64_t d,
                                        std::int64_t k, double lambda_offdiag, linalg::SolveReport* report = nullptr) {
  const auto eq = build_normal_equations(weights, grams, d, k, lambda_offdiag);
  return linalg::to_row_major_floats(linalg::solve_spd(eq.lhs, eq.rhs, report));
}

struct MatsReport {
  int max_iterations = 0;  // most CG iterations used by any column
  int columns = 0;
  int columns_converged = 0;
  bool negative_curvature = false;
};

// Conjugate gradient on the RegMean normal equations, one output column at a
// time, starting from `init` (normally the Task Arithmetic merge).
inline std::vector<float> mats_block(const FloatSpans& weights, const FloatSpans& grams, std::int64_t d,
                                     std::int64_t k, std::span<const float> init, int iterations,
                                     double lambda_offdiag, MatsReport* report = nullptr) {
  if (iterations < 0) throw ConfigError("MaTS needs a nonnegative CG iteration count");
  const auto eq = build_normal_equations(weights, grams, d, k, lambda_offdiag);
  detail::require_size(init.size(), static_cast<std::size_t>(d * k), "mats init");
  linalg::Matrix x = linalg::to_matrix(init, d, k);
  MatsReport local;
  local.columns = static_cast<int>(k);
  for (std::int64_t c = 0; c < k; ++c) {
    linalg::Vector column = x.col(c);
    const linalg::Vector b = eq.rhs.col(c);
    const auto result = linalg::conjugate_gradient(eq.lhs, b, column, iterations, kCgRelativeTolerance);
    x.col(c) = column;
    local.max_iterations = std::max(local.max_iterations, result.iterations);
    local.columns_converged += result.converged;
    local.negative_curvature = local.negative_curvature || result.negative_curvature;
  }
  if (report) *report = local;
  return linalg::to_row_major_floats(x);
}

// ---------------------------------------------------------------------------
// Task vectors and trimming
// ---------------------------------------------------------------------------

struct TaskTensor {
  std::vector<std::int64_t> shape;
  std::vector<double> values;
};

// tau = theta - theta_base per tensor, kept in float64.
using TaskVector = std::map<std::string, TaskTensor, std::less<>>;

inline std::size_t parameter_count(const TaskVector& tv) {
  std::size_t n = 0;
  for (const auto& [name, t] : tv) n += t.values.size();
  return n;
}

// Last retained entry in the order (|tau| descending, tensor name ascending,
// flat index ascending). An entry is kept iff it does not come after it.
struct TrimCutoff {
  double magnitude = 0.0;
  std::string name;
  std::size_t index = 0;

  bool retains(double magnitude_, std::string_view name_, std::size_t index_) const {
    if (magnitude_ != magnitude) return magnitude_ > magnitude;
    if (name_ != name) return name_ < name;
    return index_ <= index;
  }
};

inline std::size_t trim_retained_count(double k_fraction, std::size_t total) {
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw ConfigError("TIES k_fraction must lie in (0, 1]");
  // The slack absorbs decimal fractions such as 0.3 that are not exact in binary.
  const double scaled = k_fraction * static_cast<double>(total);
  auto count = static_cast<std::size_t>(std::ceil(scaled - 1e-9 * std::max(1.0, scaled)));
  return std::clamp<std::size_t>(count, 1, total);
}

inline TrimCutoff find_trim_cutoff(const TaskVector& tv, double k_fraction) {
  struct Entry {
    double magnitude;
    std::uint32_t tensor;
    std::size_t index;
  };
  const std::size_t total = parameter_count(tv);
  if (total == 0) throw ConfigError("cannot trim an empty task vector");
  const std::size_t keep = trim_retained_count(k_fraction, total);
  std::vector<const std::string*> names;
  std::vector<Entry> entries;
  entries.reserve(total);
  for (const auto& [name, t] : tv) {
    const auto tensor = static_cast<std::uint32_t>(names.size());
    names.push_back(&name);
    for (std::size_t j = 0; j < t.values.size(); ++j) entries.push_back({std::abs(t.values[j]), tensor, j});
  }
  // TaskVector iterates in name order, so tensor ordinal order is name order.
  auto before = [](const Entry& a, const Entry& b) {
    if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.index < b.index;
  };
  std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep - 1), entries.end(), before);
  const Entry& last = entries[keep - 1];
  return {last.magnitude, *names[last.tensor], last.index};
}

inline std::vector<std::uint8_t> trim_mask(std::string_view name, std::span<const double> delta,
                                           const TrimCutoff& cutoff) {
  std::vector<std::uint8_t> mask(delta.size());
  for (std::size_t j = 0; j < delta.size(); ++j) mask[j] = cutoff.retains(std::abs(delta[j]), name, j) ? 1 : 0;
  return mask;
}

// Zeroes delta entries whose mask value is 0. Masks arrive as float32 0/1.
template <class MaskValue>
void apply_mask_inplace(std::span<double> delta, std::span<const MaskValue> mask) {
  detail::require_size(mask.size(), delta.size(), "trim mask");
  for (std::size_t j = 0; j < delta.size(); ++j) {
    if (mask[j] == MaskValue{0}) delta[j] = 0.0;
  }
}

struct TrimmedTaskVector {
  TaskVector values;  // retained entries keep their tau value, the rest are zero
  std::map<std::string, std::vector<std::uint8_t>, std::less<>> mask;
  double k_fraction = 1.0;
  std::size_t retained = 0;
};

inline TrimmedTaskVector compute_trim_statistic(const TaskVector& tv, double k_fraction) {
  const TrimCutoff cutoff = find_trim_cutoff(tv, k_fraction);
  TrimmedTaskVector out;
  out.k_fraction = k_fraction;
  for (const auto& [name, t] : tv) {
    auto mask = trim_mask(name, t.values, cutoff);
    TaskTensor kept = t;
    apply_mask_inplace<std::uint8_t>(kept.values, mask);
    for (auto m : mask) out.retained += m;
    out.values.emplace(name, std::move(kept));
    out.mask.emplace(name, std::move(mask));
  }
  return out;
}

// "trim/<tensor>" mask tensors for a statistics container.
inline TensorMap trim_mask_tensors(const TrimmedTaskVector& trimmed) {
  TensorMap out;
  for (const auto& [name, mask] : trimmed.mask) {
    std::vector<float> values(mask.begin(), mask.end());
    out.emplace(std::string(kTrimPrefix) + name, Tensor(trimmed.values.at(name).shape, std::move(values)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model-level operations
// ---------------------------------------------------------------------------

namespace detail {

template <class MapA, class MapB>
void require_aligned(const MapA& reference, const MapB& other, std::string_view what) {
  if (reference.size() != other.size()) throw ShapeError(std::string(what) + ": tensor sets differ");
  auto it = other.begin();
  for (const auto& [name, t] : reference) {
    if (it->first != name) throw ShapeError(std::string(what) + ": tensor '" + name + "' missing or misaligned");
    if (it->second.shape != t.shape) throw ShapeError(std::string(what) + ": shape mismatch on '" + name + "'");
    ++it;
  }
}

inline void require_models(std::span<const TensorMap> models, std::string_view what) {
  if (models.empty()) throw ConfigError(std::string(what) + ": no constituents");
  for (const auto& m : models) require_aligned(models.front(), m, what);
}

inline FloatSpans views_of(std::span<const TensorMap> models, const std::string& name) {
  FloatSpans spans;
  spans.reserve(models.size());
  for (const auto& m : models) spans.emplace_back(m.at(name).values);
  return spans;
}

inline void require_positive_lambda(double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("task-vector scale lambda must be positive");
}

}  // namespace detail

inline TensorMap merge_average(std::span<const TensorMap> models) {
  detail::require_models(models, "average");
  TensorMap out;
  for (const auto& [name, t] : models.front()) {
    out.emplace(name, Tensor(t.shape, average_block(detail::views_of(models, name))));
  }
  return out;
}

inline TaskVector compute_task_vector(const TensorMap& model, const TensorMap& base) {
  detail::require_aligned(base, model, "task vector");
  TaskVector tv;
  for (const auto& [name, t] : base) tv.emplace(name, TaskTensor{t.shape, task_delta(model.at(name).values, t.values)});
  return tv;
}

inline TensorMap merge_task_arithmetic(const TensorMap& base, std::span<const TaskVector> task_vectors,
                                       double lambda) {
  detail::require_positive_lambda(lambda);
  if (task_vectors.empty()) throw ConfigError("task arithmetic: no task vectors");
  for (const auto& tv : task_vectors) detail::require_aligned(base, tv, "task arithmetic");
  TensorMap out;
  for (const auto& [name, t] : base) {
    DeltaSpans deltas;
    for (const auto& tv : task_vectors) deltas.emplace_back(tv.at(name).values);
    out.emplace(name, Tensor(t.shape, apply_task_sum(t.values, deltas, lambda)));
  }
  return out;
}

// Dropout-and-rescale on one constituent's task vector. `constituent` selects the
// random stream together with the seed and each tensor's name.
inline TaskVector apply_dare(const TaskVector& tv, double p, std::uint64_t seed, std::size_t constituent) {
  TaskVector out = tv;
  for (auto& [name, t] : out) {
    auto stream = rng::make_stream(seed, name, constituent);
    apply_dare_inplace(t.values, p, stream);
  }
  return out;
}

inline TensorMap merge_ties(const TensorMap& base, std::span<const TrimmedTaskVector> trimmed, double lambda) {
  detail::require_positive_lambda(lambda);
  if (trimmed.empty()) throw ConfigError("ties: no constituents");
  for (const auto& t : trimmed) detail::require_aligned(base, t.values, "ties");
  TensorMap out;
  for (const auto& [name, t] : base) {
    DeltaSpans deltas;
    for (const auto& tr : trimmed) deltas.emplace_back(tr.values.at(name).values);
    out.emplace(name, Tensor(t.shape, ties_block(t.values, deltas, lambda)));
  }
  return out;
}

// `fishers[i]` holds the diagonal Fisher of models[i] under the model's own
// tensor names (no "fisher/" prefix).
inline TensorMap merge_fisher(std::span<const TensorMap> models, std::span<const TensorMap> fishers) {
  detail::require_models(models, "fisher");
  if (fishers.size() != models.size()) throw ShapeError("fisher: need one Fisher per constituent");
  for (const auto& f : fishers) detail::require_aligned(models.front(), f, "fisher");
  TensorMap out;
  for (const auto& [name, t] : models.front()) {
    out.emplace(name, Tensor(t.shape, fisher_block(detail::views_of(models, name), detail::views_of(fishers, name))));
  }
  return out;
}

inline InnerProducts model_inner_products(std::span<const TensorMap> models) {
  detail::require_models(models, "inner products");
  InnerProducts ip(models.size());
  for (const auto& [name, t] : models.front()) ip.accumulate(detail::views_of(models, name));
  return ip;
}

// Spherical interpolation with one angle over the whole flattened model.
inline TensorMap merge_slerp(const TensorMap& a, const TensorMap& b, double t) {
  detail::require_aligned(a, b, "slerp");
  InnerProducts ip(2);
  for (const auto& [name, ta] : a) ip.accumulate(FloatSpans{ta.values, b.at(name).values});
  const auto coeffs = slerp_coefficients(ip, t);
  TensorMap out;
  for (const auto& [name, ta] : a) out.emplace(name, Tensor(ta.shape, slerp_block(ta.values, b.at(name).values, coeffs)));
  return out;
}

inline std::vector<float> merge_slerp(std::span<const float> a, std::span<const float> b, double t) {
  InnerProducts ip(2);
  ip.accumulate(FloatSpans{a, b});
  return slerp_block(a, b, slerp_coefficients(ip, t));
}

inline TensorMap merge_mlerp(std::span<const TensorMap> models) {
  const auto scale = mlerp_scale(model_inner_products(models));
  TensorMap out;
  for (const auto& [name, t] : models.front()) {
    out.emplace(name, Tensor(t.shape, mlerp_block(detail::views_of(models, name), scale)));
  }
  return out;
}

// Gram matrices per linear layer, keyed by the weight tensor name.
using GramSet = std::map<std::string, Tensor, std::less<>>;

namespace detail {

inline void require_linear(const TensorMap& model, const std::string& name) {
  auto it = model.find(name);
  if (it == model.end()) throw ConfigError("linear layer '" + name + "' is not in the model");
  if (it->second.shape.size() != 2) throw ShapeError("linear layer '" + name + "' must be a 2-D [d, k] tensor");
}

inline FloatSpans gram_views(std::span<const GramSet> grams, const std::string& name, std::int64_t d) {
  FloatSpans spans;
  for (const auto& g : grams) {
    auto it = g.find(name);
    if (it == g.end()) throw PrerequisiteError("missing Gram matrix for linear layer '" + name + "'");
    if (it->second.shape != std::vector<std::int64_t>{d, d}) {
      throw ShapeError("Gram matrix for '" + name + "' must be " + std::to_string(d) + "x" + std::to_string(d));
    }
    spans.emplace_back(it->second.values);
  }
  return spans;
}

}  // namespace detail

// Least-squares merge of each listed linear layer; every other tensor is averaged.
inline TensorMap merge_regmean(std::span<const TensorMap> models, std::span<const GramSet> grams,
                               double lambda_offdiag, const std::vector<std::string>& linear_layers) {
  detail::require_models(models, "regmean");
  if (grams.size() != models.size()) throw ShapeError("regmean: need one Gram set per constituent");
  for (const auto& name : linear_layers) detail::require_linear(models.front(), name);
  TensorMap out;
  for (const auto& [name, t] : models.front()) {
    const bool linear = std::find(linear_layers.begin(), linear_layers.end(), name) != linear_layers.end();
    if (!linear) {
      out.emplace(name, Tensor(t.shape, average_block(detail::views_of(models, name))));
      continue;
    }
    const auto d = t.shape[0];
    const auto k = t.shape[1];
    out.emplace(name, Tensor(t.shape, regmean_block(detail::views_of(models, name), detail::gram_views(grams, name, d),
                                                    d, k, lambda_offdiag)));
  }
  return out;
}

// Iterative counterpart of merge_regmean: N CG iterations per linear layer from
// `init`; every other tensor is averaged.
inline TensorMap merge_mats(std::span<const TensorMap> models, std::span<const GramSet> grams, int iterations,
                            const TensorMap& init, double lambda_offdiag,
                            const std::vector<std::string>& linear_layers) {
  detail::require_models(models, "mats");
  if (grams.size() != models.size()) throw ShapeError("mats: need one Gram set per constituent");
  detail::require_aligned(models.front(), init, "mats init");
  for (const auto& name : linear_layers) detail::require_linear(models.front(), name);
  TensorMap out;
  for (const auto& [name, t] : models.front()) {
    const bool linear = std::find(linear_layers.begin(), linear_layers.end(), name) != linear_layers.end();
    if (!linear) {
      out.emplace(name, Tensor(t.shape, average_block(detail::views_of(models, name))));
      continue;
    }
    const auto d = t.shape[0];
    const auto k = t.shape[1];
    out.emplace(name, Tensor(t.shape, mats_block(detail::views_of(models, name), detail::gram_views(grams, name, d), d,
                                                 k, init.at(name).values, iterations, lambda_offdiag)));
  }
  return out;
}

}  // namespace mergebench

#endif  // MERGEBENCH_METHODS_HPP
