// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 helpers on top of Eigen: conversions from row-major float32
// tensor storage, an SPD solve with ridge fallback, and linear conjugate gradient.

#ifndef MERGEBENCH_LINALG_HPP
#define MERGEBENCH_LINALG_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "mergebench/errors.hpp"

namespace mergebench::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMajorD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Matrix to_matrix(std::span<const float> values, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(values.size()) != rows * cols) {
    throw ShapeError("buffer of " + std::to_string(values.size()) + " values cannot be viewed as " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  return Eigen::Map<const RowMajorF>(values.data(), rows, cols).cast<double>();
}

inline std::vector<float> to_row_major_floats(const Matrix& m) {
  std::vector<float> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<RowMajorF>(out.data(), m.rows(), m.cols()) = m.cast<float>();
  return out;
}

// ||G - G^T||_inf <= tol * ||G||_inf, with inf the max absolute entry.
inline bool is_symmetric(const Matrix& g, double relative_tolerance = 1e-6) {
  if (g.rows() != g.cols()) return false;
  const double scale = g.cwiseAbs().maxCoeff();
  return (g - g.transpose()).cwiseAbs().maxCoeff() <= relative_tolerance * scale;
}

inline double min_eigenvalue(const Matrix& symmetric) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetric, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

struct SolveReport {
  bool ridge_applied = false;
  double ridge = 0.0;
};

// Solves A X = B for symmetric positive semidefinite A via Cholesky. When A is
// singular (factorization fails or rcond underflows) it retries with
// A + delta I, delta = 1e-8 * trace(A) / d.
inline Matrix solve_spd(const Matrix& a, const Matrix& b, SolveReport* report = nullptr) {
  if (a.rows() != a.cols() || a.rows() != b.rows()) throw ShapeError("solve_spd: dimension mismatch");
  constexpr double kMinRcond = 64.0 * std::numeric_limits<double>::epsilon();
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() == Eigen::Success && llt.rcond() > kMinRcond) {
    if (report) *report = {};
    return llt.solve(b);
  }
  const double d = static_cast<double>(a.rows());
  const double delta = 1e-8 * a.trace() / d;
  if (!(delta > 0.0)) throw NumericError("normal matrix is singular and has zero trace; cannot regularize");
  Matrix ridged = a;
  ridged.diagonal().array() += delta;
  Eigen::LLT<Matrix> llt_ridge(ridged);
  if (llt_ridge.info() != Eigen::Success) throw NumericError("normal matrix is not positive semidefinite");
  if (report) *report = {true, delta};
  return llt_ridge.solve(b);
}

struct CgResult {
  int iterations = 0;
  bool converged = false;
  bool negative_curvature = false;  // p^T A p <= 0 was hit; x is the last good iterate
  double initial_residual_norm = 0.0;
  double residual_norm = 0.0;
};

struct NoObserver {
  void operator()(int, const Vector&, const Vector&) const {}
};

// Linear conjugate gradient on A x = b starting from the x passed in. Stops after
// max_iterations, when ||r|| <= relative_tolerance * ||b||, or on non-positive
// curvature. observe(iteration, x, r) runs after every completed update.
template <class Observer = NoObserver>
CgResult conjugate_gradient(const Matrix& a, const Vector& b, Vector& x, int max_iterations,
                            double relative_tolerance = 1e-10, Observer&& observe = {}) {
  if (a.rows() != a.cols() || a.rows() != b.size() || b.size() != x.size()) {
    throw ShapeError("conjugate_gradient: dimension mismatch");
  }
  CgResult result;
  const double threshold = relative_tolerance * b.norm();
  Vector r = b - a * x;
  double rs = r.squaredNorm();
  result.initial_residual_norm = std::sqrt(rs);
  result.residual_norm = result.initial_residual_norm;
  if (result.residual_norm <= threshold) {
    result.converged = true;
    return result;
  }
  Vector p = r;
  Vector ap(b.size());
  for (int it = 1; it <= max_iterations; ++it) {
    ap.noalias() = a * p;
    const double curvature = p.dot(ap);
    if (!(curvature > 0.0)) {
      result.negative_curvature = true;
      break;
    }
    const double alpha = rs / curvature;
    x += alpha * p;
    r -= alpha * ap;
    const double rs_next = r.squaredNorm();
    result.iterations = it;
    result.residual_norm = std::sqrt(rs_next);
    observe(it, x, r);
    if (result.residual_norm <= threshold) {
      result.converged = true;
      break;
    }
    p = r + (rs_next / rs) * p;
    rs = rs_next;
  }
  return result;
}

}  // namespace mergebench::linalg

#endif  // MERGEBENCH_LINALG_HPP
