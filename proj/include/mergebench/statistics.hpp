// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Auxiliary per-model statistics: Gram matrices of linear-layer inputs, the
// diagonal Fisher, and TIES trim masks. A small fully connected ToyModel with an
// exact backward pass provides the gradients, so no ML framework is needed.
//
// Parameter layout of a ToyModel layer "<name>": "<name>.weight" is [d, k]
// (outputs = inputs * W + b) and "<name>.bias" is [k].

#ifndef MERGEBENCH_STATISTICS_HPP
#define MERGEBENCH_STATISTICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mergebench/checkpoint.hpp"
#include "mergebench/cost_model.hpp"
#include "mergebench/errors.hpp"
#include "mergebench/linalg.hpp"
#include "mergebench/methods.hpp"
#include "mergebench/rng.hpp"

namespace mergebench::stats {

using linalg::Matrix;
using linalg::Vector;

// ---------------------------------------------------------------------------
// Gram matrices

struct ActivationBatch {
  std::string layer;
  Eigen::MatrixXf z;  // L x d input activations
};

struct GramMatrix {
  std::string layer;
  Matrix g;  // d x d
  std::uint64_t count = 0;  // total L behind the 1/L normalization

  Tensor to_tensor() const {
    return Tensor({g.rows(), g.cols()}, linalg::to_row_major_floats(g));
  }
};

// G = (1 / sum L) * sum Z^T Z, accumulated in float64 in batch order and
// symmetrized before returning.
inline GramMatrix compute_gram(std::span<const ActivationBatch> batches) {
  if (batches.empty()) throw ShapeError("compute_gram: no activation batches");
  const auto d = batches.front().z.cols();
  GramMatrix out;
  out.layer = batches.front().layer;
  out.g = Matrix::Zero(d, d);
  for (const auto& b : batches) {
    if (b.z.cols() != d) {
      throw ShapeError("compute_gram: layer '" + b.layer + "' batch has d=" + std::to_string(b.z.cols()) +
                       ", expected " + std::to_string(d));
    }
    if (b.z.rows() < 1) throw ShapeError("compute_gram: empty activation batch");
    const Matrix z = b.z.cast<double>();
    out.g.noalias() += z.transpose() * z;
    out.count += static_cast<std::uint64_t>(z.rows());
  }
  out.g /= static_cast<double>(out.count);
  out.g = 0.5 * (out.g + out.g.transpose()).eval();
  return out;
}

inline GramMatrix compute_gram(const ActivationBatch& batch) { return compute_gram(std::span(&batch, 1)); }

// ---------------------------------------------------------------------------
// Toy model

enum class Loss { squared_error, cross_entropy };

struct Layer {
  std::string name;
  Matrix w;  // d x k
  std::optional<Vector> b;  // k
  bool tanh = false;  // elementwise tanh after the affine map
};

struct Dataset {
  Matrix x;  // n x d0
  Matrix y;  // n x k_out, squared error
  std::vector<int> labels;  // n, cross entropy

  Eigen::Index size() const { return x.rows(); }
};

struct ForwardTrace {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> outputs;  // output of each layer after the nonlinearity
};

struct ToyModel {
  std::vector<Layer> layers;
  Loss loss = Loss::squared_error;

  void validate() const {
    if (layers.empty()) throw ShapeError("toy model has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      if (layer.b && layer.b->size() != layer.w.cols()) throw ShapeError("layer '" + layer.name + "' bias size");
      if (l > 0 && layers[l - 1].w.cols() != layer.w.rows()) {
        throw ShapeError("layer '" + layer.name + "' input dim does not match the previous layer");
      }
    }
  }

  Eigen::Index input_dim() const { return layers.front().w.rows(); }
  Eigen::Index output_dim() const { return layers.back().w.cols(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.w.size() + (l.b ? l.b->size() : 0));
    return n;
  }

  Matrix forward(const Matrix& x, ForwardTrace* trace = nullptr) const {
    if (x.cols() != input_dim()) throw ShapeError("toy model input has the wrong width");
    Matrix h = x;
    for (const auto& layer : layers) {
      if (trace) trace->inputs.push_back(h);
      Matrix z = h * layer.w;
      if (layer.b) z.rowwise() += layer.b->transpose();
      if (layer.tanh) z = z.array().tanh().matrix();
      if (trace) trace->outputs.push_back(z);
      h = std::move(z);
    }
    return h;
  }

  // Backpropagates grad_out = dL/d(output) (n x k_out). Returns, per layer, the
  // gradient with respect to that layer's pre-activation.
  std::vector<Matrix> backward(const ForwardTrace& trace, const Matrix& grad_out) const {
    std::vector<Matrix> deltas(layers.size());
    Matrix g = grad_out;
    for (std::size_t l = layers.size(); l-- > 0;) {
      if (layers[l].tanh) g = (g.array() * (1.0 - trace.outputs[l].array().square())).matrix();
      deltas[l] = g;
      if (l > 0) g = deltas[l] * layers[l].w.transpose();
    }
    return deltas;
  }

  // Flat order: layers in sequence, each W row-major then b.
  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index at = 0;
    for (const auto& l : layers) {
      for (Eigen::Index i = 0; i < l.w.rows(); ++i) {
        for (Eigen::Index j = 0; j < l.w.cols(); ++j) out[at++] = l.w(i, j);
      }
      if (l.b) {
        out.segment(at, l.b->size()) = *l.b;
        at += l.b->size();
      }
    }
    return out;
  }

  void unflatten(const Vector& theta) {
    if (static_cast<std::size_t>(theta.size()) != parameter_count()) throw ShapeError("unflatten: size mismatch");
    Eigen::Index at = 0;
    for (auto& l : layers) {
      for (Eigen::Index i = 0; i < l.w.rows(); ++i) {
        for (Eigen::Index j = 0; j < l.w.cols(); ++j) l.w(i, j) = theta[at++];
      }
      if (l.b) {
        *l.b = theta.segment(at, l.b->size());
        at += l.b->size();
      }
    }
  }

  TensorMap to_tensors() const {
    TensorMap out;
    for (const auto& l : layers) {
      out.emplace(l.name + ".weight", Tensor({l.w.rows(), l.w.cols()}, linalg::to_row_major_floats(l.w)));
      if (l.b) {
        std::vector<float> b(l.b->data(), l.b->data() + l.b->size());
        out.emplace(l.name + ".bias", Tensor({l.b->size()}, std::move(b)));
      }
    }
    return out;
  }

  // Rebuilds a model from tensors. `layer_names` gives the chain order; when
  // empty, every 2-D "<name>.weight" is taken and the layers are chained by
  // dimension. tanh applies to every layer but the last when `tanh_hidden`.
  static ToyModel from_tensors(const TensorMap& tensors, std::vector<std::string> layer_names = {},
                               bool tanh_hidden = false, Loss loss = Loss::squared_error) {
    if (layer_names.empty()) layer_names = chain_layers(tensors);
    ToyModel model;
    model.loss = loss;
    for (std::size_t i = 0; i < layer_names.size(); ++i) {
      const auto& name = layer_names[i];
      auto w = tensors.find(name + ".weight");
      if (w == tensors.end() || w->second.shape.size() != 2) {
        throw ShapeError("toy model: no 2-D tensor '" + name + ".weight'");
      }
      Layer layer;
      layer.name = name;
      layer.w = linalg::to_matrix(w->second.values, w->second.shape[0], w->second.shape[1]);
      if (auto b = tensors.find(name + ".bias"); b != tensors.end()) {
        layer.b = Eigen::Map<const Eigen::VectorXf>(b->second.values.data(),
                                                     static_cast<Eigen::Index>(b->second.numel()))
                      .cast<double>();
      }
      layer.tanh = tanh_hidden && i + 1 < layer_names.size();
      model.layers.push_back(std::move(layer));
    }
    model.validate();
    return model;
  }

 private:
  static std::vector<std::string> chain_layers(const TensorMap& tensors) {
    struct Candidate {
      std::string name;
      std::int64_t d, k;
    };
    std::vector<Candidate> candidates;
    for (const auto& [name, t] : tensors) {
      if (name.ends_with(".weight") && t.shape.size() == 2) {
        candidates.push_back({name.substr(0, name.size() - 7), t.shape[0], t.shape[1]});
      }
    }
    if (candidates.empty()) throw ShapeError("toy model: no '<layer>.weight' matrices found");
    if (candidates.size() == 1) return {candidates.front().name};
    // The first layer is the one whose input dim is nobody's output dim.
    std::vector<std::string> order;
    std::vector<bool> used(candidates.size(), false);
    std::optional<std::int64_t> want;
    for (std::size_t step = 0; step < candidates.size(); ++step) {
      std::optional<std::size_t> pick;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (used[i]) continue;
        bool ok = want ? candidates[i].d == *want : true;
        if (!want) {
          for (std::size_t j = 0; j < candidates.size(); ++j) ok = ok && (j == i || candidates[j].k != candidates[i].d);
        }
        if (ok) {
          if (pick) throw ShapeError("toy model: layer order is ambiguous; name the layers explicitly");
          pick = i;
        }
      }
      if (!pick) throw ShapeError("toy model: weight matrices do not chain");
      used[*pick] = true;
      order.push_back(candidates[*pick].name);
      want = candidates[*pick].k;
    }
    return order;
  }
};

namespace detail {

inline void require_targets(const ToyModel& model, const Dataset& data) {
  if (data.size() < 1) throw ShapeError("dataset is empty");
  if (model.loss == Loss::squared_error) {
    if (data.y.rows() != data.size() || data.y.cols() != model.output_dim()) {
      throw ShapeError("squared-error targets must be n x " + std::to_string(model.output_dim()));
    }
  } else {
    if (static_cast<Eigen::Index>(data.labels.size()) != data.size()) throw ShapeError("one label per example");
    for (int c : data.labels) {
      if (c < 0 || c >= model.output_dim()) throw ShapeError("label out of range");
    }
  }
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double top = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - top).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Per-layer parameter gradients packed in flatten() order.
inline Vector pack_gradients(const ToyModel& model, const ForwardTrace& trace, const std::vector<Matrix>& deltas) {
  Vector out(static_cast<Eigen::Index>(model.parameter_count()));
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Matrix gw = trace.inputs[l].transpose() * deltas[l];
    for (Eigen::Index i = 0; i < gw.rows(); ++i) {
      for (Eigen::Index j = 0; j < gw.cols(); ++j) out[at++] = gw(i, j);
    }
    if (model.layers[l].b) {
      const Eigen::Index k = deltas[l].cols();
      out.segment(at, k) = deltas[l].colwise().sum().transpose();
      at += k;
    }
  }
  return out;
}

inline int categorical(const Eigen::RowVectorXd& probs, rng::Engine& engine) {
  const double u = rng::uniform01(engine);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    acc += probs[c];
    if (u < acc) return static_cast<int>(c);
  }
  return static_cast<int>(probs.size() - 1);
}

}  // namespace detail

// Mean loss: squared error 1/(2n) sum ||f - y||^2, cross entropy mean -log p(label).
inline double loss(const ToyModel& model, const Dataset& data) {
  detail::require_targets(model, data);
  const Matrix f = model.forward(data.x);
  const double n = static_cast<double>(data.size());
  if (model.loss == Loss::squared_error) return 0.5 * (f - data.y).squaredNorm() / n;
  double total = 0.0;
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    const double top = f.row(r).maxCoeff();
    const double lse = top + std::log((f.row(r).array() - top).exp().sum());
    total += lse - f(r, data.labels[static_cast<std::size_t>(r)]);
  }
  return total / n;
}

// dL/d(output) for the mean loss.
inline Matrix output_gradient(const ToyModel& model, const Matrix& f, const Dataset& data) {
  const double n = static_cast<double>(data.size());
  if (model.loss == Loss::squared_error) return (f - data.y) / n;
  Matrix g = detail::softmax_rows(f);
  for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, data.labels[static_cast<std::size_t>(r)]) -= 1.0;
  return g / n;
}

inline Vector loss_gradient(const ToyModel& model, const Dataset& data) {
  detail::require_targets(model, data);
  ForwardTrace trace;
  const Matrix f = model.forward(data.x, &trace);
  return detail::pack_gradients(model, trace, model.backward(trace, output_gradient(model, f, data)));
}

inline Vector numeric_gradient(const ToyModel& model, const Dataset& data, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite difference step must be positive");
  ToyModel probe = model;
  const Vector theta = model.flatten();
  Vector grad(theta.size());
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    Vector t = theta;
    t[j] = theta[j] + eps;
    probe.unflatten(t);
    const double up = loss(probe, data);
    t[j] = theta[j] - eps;
    probe.unflatten(t);
    const double down = loss(probe, data);
    grad[j] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// Gradients smaller than this are compared absolutely.
inline constexpr double kGradientCheckFloor = 1e-2;

// max_j |a_j - n_j| / max(|a_j|, |n_j|, floor)
inline double max_relative_error(const Vector& analytic, const Vector& numeric, double floor = kGradientCheckFloor) {
  if (analytic.size() != numeric.size()) throw ShapeError("gradient size mismatch");
  double worst = 0.0;
  for (Eigen::Index j = 0; j < analytic.size(); ++j) {
    const double scale = std::max({std::abs(analytic[j]), std::abs(numeric[j]), floor});
    worst = std::max(worst, std::abs(analytic[j] - numeric[j]) / scale);
  }
  return worst;
}

inline double finite_difference_check(const ToyModel& model, const Dataset& data, double eps = 1e-4) {
  const Vector numeric = numeric_gradient(model, data, eps);
  return max_relative_error(loss_gradient(model, data), numeric);
}

// ---------------------------------------------------------------------------
// Fisher

enum class FisherMode {
  sampled,    // labels drawn from the model's own predictive distribution
  empirical,  // observed labels / targets
};

struct FisherOptions {
  FisherMode mode = FisherMode::sampled;
  int samples = 1;  // label draws per example (sampled mode)
  std::uint64_t seed = 0;
};

// F[j] = mean over (example, draw) of (d log p(y|x) / d theta_j)^2, with a
// unit-variance Gaussian likelihood for squared error and softmax for cross
// entropy. Per-example weight gradients are a_n delta_n^T, so the sum of their
// squares over a batch is (A o A)^T (Delta o Delta). Names are unprefixed.
inline TensorMap compute_fisher_diag(const ToyModel& model, const Dataset& data, const FisherOptions& options = {}) {
  model.validate();
  if (options.samples < 1) throw ConfigError("fisher: samples must be at least 1");
  if (data.size() < 1) throw ShapeError("fisher: dataset is empty");
  if (options.mode == FisherMode::empirical) detail::require_targets(model, data);
  const int draws = options.mode == FisherMode::empirical ? 1 : options.samples;

  ForwardTrace trace;
  const Matrix f = model.forward(data.x, &trace);
  const Matrix probs = model.loss == Loss::cross_entropy ? detail::softmax_rows(f) : Matrix();
  rng::Engine engine = rng::make_stream(options.seed, "fisher", 0);

  std::vector<Matrix> fw(model.layers.size());
  std::vector<Vector> fb(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    fw[l] = Matrix::Zero(model.layers[l].w.rows(), model.layers[l].w.cols());
    fb[l] = Vector::Zero(model.layers[l].w.cols());
  }
  for (int s = 0; s < draws; ++s) {
    // score = d log p / d f per example
    Matrix score(f.rows(), f.cols());
    if (model.loss == Loss::squared_error) {
      if (options.mode == FisherMode::empirical) {
        score = data.y - f;
      } else {
        for (Eigen::Index r = 0; r < score.rows(); ++r) {
          for (Eigen::Index c = 0; c < score.cols(); ++c) score(r, c) = rng::standard_normal(engine);
        }
      }
    } else {
      score = -probs;
      for (Eigen::Index r = 0; r < score.rows(); ++r) {
        const int y = options.mode == FisherMode::empirical ? data.labels[static_cast<std::size_t>(r)]
                                                            : detail::categorical(probs.row(r), engine);
        score(r, y) += 1.0;
      }
    }
    const auto deltas = model.backward(trace, score);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const Matrix d2 = deltas[l].array().square().matrix();
      fw[l].noalias() += trace.inputs[l].array().square().matrix().transpose() * d2;
      fb[l] += d2.colwise().sum().transpose();
    }
  }
  const double count = static_cast<double>(data.size()) * draws;
  TensorMap out;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    out.emplace(layer.name + ".weight",
                Tensor({layer.w.rows(), layer.w.cols()}, linalg::to_row_major_floats(fw[l] / count)));
    if (layer.b) {
      const Vector b = fb[l] / count;
      std::vector<float> values(static_cast<std::size_t>(b.size()));
      for (Eigen::Index j = 0; j < b.size(); ++j) values[static_cast<std::size_t>(j)] = static_cast<float>(b[j]);
      out.emplace(layer.name + ".bias", Tensor({b.size()}, std::move(values)));
    }
  }
  return out;
}

// Gram of each layer's input activations on x, keyed by "<layer>.weight".
inline std::map<std::string, GramMatrix> layer_grams(const ToyModel& model, const Matrix& x) {
  ForwardTrace trace;
  model.forward(x, &trace);
  std::map<std::string, GramMatrix> out;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    ActivationBatch batch{model.layers[l].name + ".weight", trace.inputs[l].cast<float>()};
    out.emplace(batch.layer, compute_gram(batch));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics containers

struct StatisticsOptions {
  bool fisher = true;
  bool gram = true;
  const TensorMap* base = nullptr;  // trim masks are produced when set
  double k_fraction = 0.2;
  FisherOptions fisher_options;
};

// One statistics container for one constituent, using reserved prefixes.
inline TensorMap build_statistics(const ToyModel& model, const Dataset& data, const StatisticsOptions& options = {}) {
  TensorMap out;
  if (options.fisher) {
    for (auto& [name, t] : compute_fisher_diag(model, data, options.fisher_options)) {
      out.emplace(std::string(kFisherPrefix) + name, std::move(t));
    }
  }
  if (options.gram) {
    for (const auto& [name, g] : layer_grams(model, data.x)) out.emplace(std::string(kGramPrefix) + name, g.to_tensor());
  }
  if (options.base) {
    const auto trimmed = compute_trim_statistic(compute_task_vector(model.to_tensors(), *options.base), options.k_fraction);
    for (auto& [name, t] : trim_mask_tensors(trimmed)) out.emplace(name, std::move(t));
  }
  return out;
}

// Once-per-model statistics cost of a method.
inline cost::Flops compute_statistics_flops(Method method, const cost::LayerDims& dims) {
  return cost::statistics_flops(method, dims);
}

}  // namespace mergebench::stats

#endif  // MERGEBENCH_STATISTICS_HPP
