// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic (task x domain) grid for compositional generalization.
//
// The input has a shared feature block, one block per domain and one per task,
// each of width b, so P = (1 + D + C) * b. An example of cell (c, d) is nonzero
// only in the shared block, domain block d (scaled by s_d) and task block c:
//
//   y = x_s S_cd + x_d U_d + x_c V_c + noise
//   U_d  = U0 + domain_shift * dU_d
//   V_c  = V0 + task_shift * dV_c
//   S_cd = S0 + shared_shift * (A_d + B_c)
//
// The pretrained model knows U0, V0 and S0 but none of the shifts. Domain and
// task blocks are shared by every cell with that domain or task, so an
// off-diagonal cell can be solved by combining the domain block of one
// constituent with the task block of another. The shared block is where
// constituents interfere: no single linear model fits every cell.

#ifndef MERGEBENCH_BENCH_SCENARIO_HPP
#define MERGEBENCH_BENCH_SCENARIO_HPP

#include <algorithm>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mergebench/checkpoint.hpp"
#include "mergebench/errors.hpp"
#include "mergebench/linalg.hpp"
#include "mergebench/rng.hpp"

namespace mergebench::bench {

using linalg::Matrix;
using linalg::Vector;

inline constexpr const char* kWeightName = "linear.weight";
inline constexpr const char* kBiasName = "linear.bias";

struct ScenarioConfig {
  int domains = 8;
  int tasks = 8;
  int block_dim = 4;  // b, features per domain / task block
  int outputs = 4;  // q
  double noise = 0.1;  // sigma
  double domain_shift = 1.0;
  double task_shift = 0.25;
  double shared_shift = 0.5;
  int train_examples = 64;
  int validation_examples = 32;
  int test_examples = 64;
  double ridge = 1e-3;  // alpha, pulls constituents toward the pretrained model
  std::uint64_t seed = 0;

  int input_dim() const { return (1 + domains + tasks) * block_dim; }

  void validate() const {
    if (domains < 2 || tasks < 2) throw ConfigError("scenario: domains and tasks must both be at least 2");
    if (block_dim < 1 || outputs < 1) throw ConfigError("scenario: block_dim and outputs must be positive");
    if (train_examples < 1 || validation_examples < 1 || test_examples < 1) {
      throw ConfigError("scenario: every split needs at least one example");
    }
    if (!(noise >= 0.0) || !(ridge >= 0.0)) throw ConfigError("scenario: noise and ridge must be nonnegative");
  }
};

inline nlohmann::json to_json(const ScenarioConfig& c) {
  return {{"domains", c.domains},
          {"tasks", c.tasks},
          {"block_dim", c.block_dim},
          {"outputs", c.outputs},
          {"noise", c.noise},
          {"domain_shift", c.domain_shift},
          {"task_shift", c.task_shift},
          {"shared_shift", c.shared_shift},
          {"train_examples", c.train_examples},
          {"validation_examples", c.validation_examples},
          {"test_examples", c.test_examples},
          {"ridge", c.ridge},
          {"seed", c.seed}};
}

inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("scenario must be a JSON object");
  ScenarioConfig c;
  const auto defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown key '" + key + "' in scenario");
  }
  try {
    c.domains = j.value("domains", c.domains);
    c.tasks = j.value("tasks", c.tasks);
    c.block_dim = j.value("block_dim", c.block_dim);
    c.outputs = j.value("outputs", c.outputs);
    c.noise = j.value("noise", c.noise);
    c.domain_shift = j.value("domain_shift", c.domain_shift);
    c.task_shift = j.value("task_shift", c.task_shift);
    c.shared_shift = j.value("shared_shift", c.shared_shift);
    c.train_examples = j.value("train_examples", c.train_examples);
    c.validation_examples = j.value("validation_examples", c.validation_examples);
    c.test_examples = j.value("test_examples", c.test_examples);
    c.ridge = j.value("ridge", c.ridge);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid scenario: ") + e.what());
  }
  c.validate();
  return c;
}

struct Cell {
  int task = 0;
  int domain = 0;

  auto operator<=>(const Cell&) const = default;
};

inline std::string to_string(const Cell& c) {
  return "(" + std::to_string(c.task) + "," + std::to_string(c.domain) + ")";
}

struct Split {
  Matrix x;  // n x P
  Matrix y;  // n x q
};

enum class SplitKind { train, validation, test };

struct CellData {
  Cell cell;
  Split train;
  Split validation;
  Split test;

  const Split& split(SplitKind kind) const {
    switch (kind) {
      case SplitKind::train: return train;
      case SplitKind::validation: return validation;
      case SplitKind::test: return test;
    }
    return test;
  }
};

struct Scenario {
  ScenarioConfig config;
  Matrix truth;  // P x q; shared rows hold S0
  std::vector<Matrix> shared_domain;  // A_d, b x q
  std::vector<Matrix> shared_task;  // B_c, b x q
  Vector domain_scale;  // s_d
  TensorMap base;  // pretrained model
  std::vector<Cell> held_in;
  std::vector<Cell> generalization;
  std::vector<CellData> cells;  // every (task, domain), task-major

  int domain_offset(int d) const { return (1 + d) * config.block_dim; }
  int task_offset(int c) const { return (1 + config.domains + c) * config.block_dim; }

  // Ground truth of one cell.
  Matrix cell_truth(const Cell& c) const {
    Matrix w = truth;
    w.topRows(config.block_dim) +=
        config.shared_shift * (shared_domain.at(static_cast<std::size_t>(c.domain)) +
                               shared_task.at(static_cast<std::size_t>(c.task)));
    return w;
  }

  const CellData& data(const Cell& c) const {
    if (c.task < 0 || c.task >= config.tasks || c.domain < 0 || c.domain >= config.domains) {
      throw ConfigError("unknown cell " + to_string(c));
    }
    return cells[static_cast<std::size_t>(c.task * config.domains + c.domain)];
  }

  bool is_held_in(const Cell& c) const { return std::binary_search(held_in.begin(), held_in.end(), c); }
};

// Held-in cells: a perfect matching of tasks and domains extended cyclically,
// {(c, c mod D)} when C >= D and {(d mod C, d)} otherwise. Sorted.
inline std::vector<Cell> held_in_cells(int domains, int tasks) {
  std::vector<Cell> out;
  if (tasks >= domains) {
    for (int c = 0; c < tasks; ++c) out.push_back({c, c % domains});
  } else {
    for (int d = 0; d < domains; ++d) out.push_back({d % tasks, d});
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace detail {

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, rng::Engine& engine) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng::standard_normal(engine);
  }
  return m;
}

inline Split draw_split(const Scenario& s, const Cell& cell, int n, rng::Engine& engine) {
  const auto& c = s.config;
  Split out;
  out.x = Matrix::Zero(n, c.input_dim());
  const double scale = s.domain_scale[cell.domain];
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < c.block_dim; ++j) out.x(r, j) = rng::standard_normal(engine);
    for (int j = 0; j < c.block_dim; ++j) out.x(r, s.domain_offset(cell.domain) + j) = scale * rng::standard_normal(engine);
    for (int j = 0; j < c.block_dim; ++j) out.x(r, s.task_offset(cell.task) + j) = rng::standard_normal(engine);
  }
  out.y = out.x * s.cell_truth(cell);
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < c.outputs; ++j) out.y(r, j) += c.noise * rng::standard_normal(engine);
  }
  return out;
}

}  // namespace detail

inline TensorMap linear_model(const Matrix& w, const Vector& b) {
  TensorMap out;
  out.emplace(kWeightName, Tensor({w.rows(), w.cols()}, linalg::to_row_major_floats(w)));
  std::vector<float> bias(static_cast<std::size_t>(b.size()));
  for (Eigen::Index j = 0; j < b.size(); ++j) bias[static_cast<std::size_t>(j)] = static_cast<float>(b[j]);
  out.emplace(kBiasName, Tensor({b.size()}, std::move(bias)));
  return out;
}

inline Scenario generate_scenario(const ScenarioConfig& config) {
  config.validate();
  Scenario s;
  s.config = config;
  const int b = config.block_dim;
  const int q = config.outputs;
  const int P = config.input_dim();

  auto factors = rng::make_stream(config.seed, "factors", 0);
  const Matrix u0 = detail::normal_matrix(b, q, factors);
  const Matrix v0 = detail::normal_matrix(b, q, factors);
  const Matrix s0 = detail::normal_matrix(b, q, factors);
  Matrix base_w(P, q);
  s.truth.resize(P, q);
  base_w.topRows(b) = s0;
  s.truth.topRows(b) = s0;
  for (int d = 0; d < config.domains; ++d) {
    base_w.middleRows(s.domain_offset(d), b) = u0;
    s.truth.middleRows(s.domain_offset(d), b) = u0 + config.domain_shift * detail::normal_matrix(b, q, factors);
  }
  for (int c = 0; c < config.tasks; ++c) {
    base_w.middleRows(s.task_offset(c), b) = v0;
    s.truth.middleRows(s.task_offset(c), b) = v0 + config.task_shift * detail::normal_matrix(b, q, factors);
  }
  for (int d = 0; d < config.domains; ++d) s.shared_domain.push_back(detail::normal_matrix(b, q, factors));
  for (int c = 0; c < config.tasks; ++c) s.shared_task.push_back(detail::normal_matrix(b, q, factors));
  s.base = linear_model(base_w, Vector::Zero(q));

  auto scales = rng::make_stream(config.seed, "domain_scale", 0);
  s.domain_scale.resize(config.domains);
  for (int d = 0; d < config.domains; ++d) s.domain_scale[d] = 0.5 + rng::uniform01(scales);

  s.held_in = held_in_cells(config.domains, config.tasks);
  for (int c = 0; c < config.tasks; ++c) {
    for (int d = 0; d < config.domains; ++d) {
      const Cell cell{c, d};
      if (!s.is_held_in(cell)) s.generalization.push_back(cell);
      const auto index = static_cast<std::uint64_t>(c * config.domains + d);
      auto train = rng::make_stream(config.seed, "train", index);
      auto validation = rng::make_stream(config.seed, "validation", index);
      auto test = rng::make_stream(config.seed, "test", index);
      CellData data;
      data.cell = cell;
      data.train = detail::draw_split(s, cell, config.train_examples, train);
      data.validation = detail::draw_split(s, cell, config.validation_examples, validation);
      data.test = detail::draw_split(s, cell, config.test_examples, test);
      s.cells.push_back(std::move(data));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Models on the scenario

struct LinearModel {
  Matrix w;  // P x q
  Vector b;  // q
};

inline LinearModel as_linear(const TensorMap& model) {
  auto w = model.find(kWeightName);
  auto b = model.find(kBiasName);
  if (w == model.end() || b == model.end() || w->second.shape.size() != 2) {
    throw ShapeError(std::string("bench models need '") + kWeightName + "' and '" + kBiasName + "'");
  }
  LinearModel out;
  out.w = linalg::to_matrix(w->second.values, w->second.shape[0], w->second.shape[1]);
  out.b = linalg::to_matrix(b->second.values, 1, static_cast<Eigen::Index>(b->second.numel())).row(0).transpose();
  return out;
}

// Ridge regression on [x, 1] pulled toward the pretrained parameters:
//   min ||[X 1] W~ - Y||^2 + alpha ||W~ - W~_base||^2
inline TensorMap fit_ridge(const Matrix& x, const Matrix& y, double alpha, const TensorMap& base) {
  if (x.rows() < 1) throw ShapeError("ridge fit: no training examples");
  if (x.rows() != y.rows()) throw ShapeError("ridge fit: inputs and targets disagree on n");
  const auto pre = as_linear(base);
  const Eigen::Index P = x.cols();
  Matrix xa(x.rows(), P + 1);
  xa << x, Vector::Ones(x.rows());
  Matrix prior(P + 1, y.cols());
  prior << pre.w, pre.b.transpose();
  Matrix a = xa.transpose() * xa;
  a.diagonal().array() += alpha;
  const Matrix rhs = xa.transpose() * y + alpha * prior;
  Eigen::LDLT<Matrix> ldlt(a);
  // Eigen's rcond estimate skips zero pivots, so check D directly.
  const auto pivots = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !(pivots.minCoeff() > 1e-13 * pivots.cwiseAbs().maxCoeff())) {
    throw NumericError("ridge fit: design is singular; use a positive ridge");
  }
  const Matrix w = ldlt.solve(rhs);
  return linear_model(w.topRows(P), w.row(P).transpose());
}

// Mean squared error over examples and outputs.
inline double mse(const LinearModel& m, const Split& split) {
  const Matrix pred = (split.x * m.w).rowwise() + m.b.transpose();
  return (pred - split.y).squaredNorm() / static_cast<double>(split.y.size());
}

// Unweighted mean over cells of -MSE on the chosen split.
inline double evaluate(const TensorMap& model, const Scenario& s, const std::vector<Cell>& cells,
                       SplitKind split = SplitKind::test) {
  if (cells.empty()) throw ConfigError("evaluate: no cells");
  const auto m = as_linear(model);
  double total = 0.0;
  for (const auto& c : cells) total += -mse(m, s.data(c).split(split));
  return total / static_cast<double>(cells.size());
}

// Closed-form joint ridge fit over the training data of all given cells.
inline TensorMap multitask_model(const Scenario& s, const std::vector<Cell>& cells) {
  Eigen::Index n = 0;
  for (const auto& c : cells) n += s.data(c).train.x.rows();
  Matrix x(n, s.config.input_dim());
  Matrix y(n, s.config.outputs);
  Eigen::Index at = 0;
  for (const auto& c : cells) {
    const auto& t = s.data(c).train;
    x.middleRows(at, t.x.rows()) = t.x;
    y.middleRows(at, t.y.rows()) = t.y;
    at += t.x.rows();
  }
  return fit_ridge(x, y, s.config.ridge, s.base);
}

}  // namespace mergebench::bench

#endif  // MERGEBENCH_BENCH_SCENARIO_HPP
