#pragma once

// Small dense-network toolkit: fully connected layers with optional
// rectifiers, exact reverse-mode gradients, an adaptive-moment optimizer and
// a central-difference gradient checker. Everything operates on row-major
// batches (one sample per row).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setsort {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Activation { kRectifier, kIdentity };

inline const char* to_string(Activation a) {
  return a == Activation::kRectifier ? "relu" : "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRectifier;
  if (s == "identity") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct LayerShape {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::kRectifier;
};

/// Layer dimensions for a chain of dense layers.
struct NetworkSpec {
  std::vector<LayerShape> layers;

  void validate() const {
    if (layers.empty()) throw DimensionError("network spec has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].in_dim == 0 || layers[i].out_dim == 0)
        throw DimensionError("layer " + std::to_string(i) + " has a zero dimension");
      if (i + 1 < layers.size() && layers[i].out_dim != layers[i + 1].in_dim)
        throw DimensionError("layer " + std::to_string(i) + " outputs " +
                             std::to_string(layers[i].out_dim) + " but layer " +
                             std::to_string(i + 1) + " expects " +
                             std::to_string(layers[i + 1].in_dim));
    }
  }
};

template <typename Scalar = double>
struct DenseLayer {
  RowMatrix<Scalar> weights;  // [out_dim x in_dim]
  Vec<Scalar> biases;         // [out_dim]
  Activation activation = Activation::kRectifier;

  std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weights.rows()); }

  bool same_shape(const DenseLayer& o) const {
    return weights.rows() == o.weights.rows() && weights.cols() == o.weights.cols() &&
           biases.size() == o.biases.size();
  }

  bool all_finite() const { return weights.allFinite() && biases.allFinite(); }

  bool operator==(const DenseLayer& o) const {
    return activation == o.activation && same_shape(o) && weights == o.weights &&
           biases == o.biases;
  }
};

template <typename Scalar = double>
using Layers = std::vector<DenseLayer<Scalar>>;

/// Per-layer gradients share the DenseLayer layout.
template <typename Scalar = double>
using LayerGrads = std::vector<DenseLayer<Scalar>>;

template <typename Scalar>
NetworkSpec spec_of(const Layers<Scalar>& layers) {
  NetworkSpec spec;
  for (const auto& l : layers) spec.layers.push_back({l.in_dim(), l.out_dim(), l.activation});
  return spec;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
template <typename Scalar = double>
Layers<Scalar> init_params(const NetworkSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Layers<Scalar> layers;
  layers.reserve(spec.layers.size());
  for (const auto& shape : spec.layers) {
    DenseLayer<Scalar> layer;
    layer.activation = shape.activation;
    layer.weights.resize(static_cast<Eigen::Index>(shape.out_dim),
                         static_cast<Eigen::Index>(shape.in_dim));
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape.in_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c)
        layer.weights(r, c) = static_cast<Scalar>(dist(rng));
    layer.biases = Vec<Scalar>::Zero(static_cast<Eigen::Index>(shape.out_dim));
    layers.push_back(std::move(layer));
  }
  return layers;
}

template <typename Scalar = double>
Layers<Scalar> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_params<Scalar>(spec, rng);
}

template <typename Scalar = double>
LayerGrads<Scalar> zeros_like(const Layers<Scalar>& layers) {
  LayerGrads<Scalar> g;
  g.reserve(layers.size());
  for (const auto& l : layers) {
    DenseLayer<Scalar> z;
    z.activation = l.activation;
    z.weights = RowMatrix<Scalar>::Zero(l.weights.rows(), l.weights.cols());
    z.biases = Vec<Scalar>::Zero(l.biases.size());
    g.push_back(std::move(z));
  }
  return g;
}

/// Inputs and pre-activations of every layer from one forward pass.
template <typename Scalar = double>
struct ForwardCache {
  std::vector<RowMatrix<Scalar>> inputs;
  std::vector<RowMatrix<Scalar>> preacts;
};

/// Batched forward pass; `input` holds one sample per row.
template <typename Scalar>
RowMatrix<Scalar> forward(const Layers<Scalar>& layers, const RowMatrix<Scalar>& input,
                          ForwardCache<Scalar>* cache = nullptr) {
  if (layers.empty()) throw DimensionError("forward through an empty network");
  if (static_cast<std::size_t>(input.cols()) != layers.front().in_dim())
    throw DimensionError("input width " + std::to_string(input.cols()) +
                         " does not match layer input " +
                         std::to_string(layers.front().in_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->preacts.clear();
  }
  RowMatrix<Scalar> x = input;
  for (const auto& layer : layers) {
    RowMatrix<Scalar> pre = x * layer.weights.transpose();
    pre.rowwise() += layer.biases.transpose();
    RowMatrix<Scalar> out = layer.activation == Activation::kRectifier
                                ? RowMatrix<Scalar>(pre.cwiseMax(Scalar(0)))
                                : pre;
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->preacts.push_back(std::move(pre));
    }
    x = std::move(out);
  }
  return x;
}

/// Single-sample convenience wrapper.
template <typename Scalar>
Vec<Scalar> forward(const Layers<Scalar>& layers, const Vec<Scalar>& input,
                    ForwardCache<Scalar>* cache = nullptr) {
  RowMatrix<Scalar> row = input.transpose();
  return forward(layers, row, cache).row(0).transpose();
}

/// Reverse pass. Parameter gradients are summed over the batch rows and
/// accumulated into `grads` (which must be shaped like `layers`). Returns the
/// gradient with respect to the input batch.
template <typename Scalar>
RowMatrix<Scalar> backward(const Layers<Scalar>& layers, const ForwardCache<Scalar>& cache,
                           const RowMatrix<Scalar>& output_grad, LayerGrads<Scalar>& grads) {
  if (cache.inputs.size() != layers.size() || cache.preacts.size() != layers.size())
    throw DimensionError("forward cache does not match the network");
  if (grads.size() != layers.size())
    throw DimensionError("gradient buffer does not match the network");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!grads[i].same_shape(layers[i]))
      throw DimensionError("gradient buffer layer " + std::to_string(i) + " has wrong shape");
    if (static_cast<std::size_t>(cache.inputs[i].cols()) != layers[i].in_dim() ||
        static_cast<std::size_t>(cache.preacts[i].cols()) != layers[i].out_dim())
      throw DimensionError("forward cache layer " + std::to_string(i) + " has wrong shape");
  }
  if (output_grad.rows() != cache.preacts.back().rows() ||
      static_cast<std::size_t>(output_grad.cols()) != layers.back().out_dim())
    throw DimensionError("output gradient shape mismatch");

  RowMatrix<Scalar> g = output_grad;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& layer = layers[k];
    if (layer.activation == Activation::kRectifier)
      g = (cache.preacts[k].array() > Scalar(0)).select(g, Scalar(0));
    grads[k].weights.noalias() += g.transpose() * cache.inputs[k];
    grads[k].biases.noalias() += g.colwise().sum().transpose();
    RowMatrix<Scalar> gin = g * layer.weights;
    g = std::move(gin);
  }
  return g;
}

template <typename Scalar>
std::pair<LayerGrads<Scalar>, Vec<Scalar>> backward(const Layers<Scalar>& layers,
                                                    const ForwardCache<Scalar>& cache,
                                                    const Vec<Scalar>& output_grad) {
  LayerGrads<Scalar> grads = zeros_like(layers);
  RowMatrix<Scalar> row = output_grad.transpose();
  RowMatrix<Scalar> gin = backward(layers, cache, row, grads);
  return {std::move(grads), gin.row(0).transpose()};
}

/// Adam moments for one chain of layers.
template <typename Scalar = double>
struct OptimizerState {
  LayerGrads<Scalar> first_moment;
  LayerGrads<Scalar> second_moment;
  std::int64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(const Layers<Scalar>& layers)
      : first_moment(zeros_like(layers)), second_moment(zeros_like(layers)) {}
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
bool all_finite(const LayerGrads<Scalar>& grads) {
  return std::all_of(grads.begin(), grads.end(), [](const auto& g) { return g.all_finite(); });
}

/// One bias-corrected adaptive-moment update, in place. Throws
/// NonFiniteError (leaving params and state untouched) if any gradient is
/// NaN or infinite.
template <typename Scalar>
void optimizer_step(Layers<Scalar>& layers, const LayerGrads<Scalar>& grads,
                    OptimizerState<Scalar>& state, double learning_rate,
                    const AdamSettings& adam = {}) {
  if (grads.size() != layers.size() || state.first_moment.size() != layers.size() ||
      state.second_moment.size() != layers.size())
    throw DimensionError("optimizer inputs do not match the network");
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (!grads[i].same_shape(layers[i]) || !state.first_moment[i].same_shape(layers[i]) ||
        !state.second_moment[i].same_shape(layers[i]))
      throw DimensionError("optimizer layer " + std::to_string(i) + " has wrong shape");
  if (!all_finite(grads)) throw NonFiniteError("non-finite gradient passed to optimizer");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(adam.beta1);
  const Scalar b2 = static_cast<Scalar>(adam.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(adam.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(adam.beta2, t));
  const Scalar lr = static_cast<Scalar>(learning_rate);
  const Scalar eps = static_cast<Scalar>(adam.epsilon);

  // An entry whose gradient and both moments are exactly zero would move by
  // exactly zero, so it is skipped.
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    Scalar* p = param.data();
    const Scalar* g = grad.data();
    Scalar* mp = m.data();
    Scalar* vp = v.data();
    const Eigen::Index n = param.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (g[i] == Scalar(0) && mp[i] == Scalar(0) && vp[i] == Scalar(0)) continue;
      mp[i] = b1 * mp[i] + (Scalar(1) - b1) * g[i];
      vp[i] = b2 * vp[i] + (Scalar(1) - b2) * g[i] * g[i];
      p[i] -= lr * (mp[i] / c1) / (std::sqrt(vp[i] / c2) + eps);
    }
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    update(layers[i].weights, grads[i].weights, state.first_moment[i].weights,
           state.second_moment[i].weights);
    update(layers[i].biases, grads[i].biases, state.first_moment[i].biases,
           state.second_moment[i].biases);
  }
  for (const auto& l : layers)
    if (!l.all_finite()) throw NonFiniteError("optimizer produced non-finite parameters");
}

/// |a - n| / max(|a|, |n|, 1e-6). The floor sits at the rounding noise of a
/// central difference with step 1e-5 on an O(1) objective (about 2e-11), so
/// gradients smaller than it are compared in absolute terms.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Smallest |pre-activation| over the rectifier units recorded in `cache`.
/// Finite differences are only meaningful when this exceeds the step size by
/// a wide margin. Infinity when no rectifier unit is present.
template <typename Scalar>
double rectifier_margin(const Layers<Scalar>& layers, const ForwardCache<Scalar>& cache) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < layers.size() && k < cache.preacts.size(); ++k)
    if (layers[k].activation == Activation::kRectifier && cache.preacts[k].size() > 0)
      margin = std::min(margin, static_cast<double>(cache.preacts[k].cwiseAbs().minCoeff()));
  return margin;
}

/// Visits every scalar parameter of `layers` as (layer index, is_weight,
/// flat index, reference).
template <typename Scalar, typename Fn>
void for_each_param(Layers<Scalar>& layers, Fn&& fn) {
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto& w = layers[k].weights;
    for (Eigen::Index i = 0; i < w.size(); ++i) fn(k, true, i, w.data()[i]);
    auto& b = layers[k].biases;
    for (Eigen::Index i = 0; i < b.size(); ++i) fn(k, false, i, b.data()[i]);
  }
}

/// Max relative error between backward() and central differences of the
/// scalar objective output_grad . forward(input), over all parameters.
/// `tamper`, when given, edits the analytic gradients before comparison
/// (used to confirm that a wrong backward pass is caught).
inline double check_gradients(Layers<double> layers, const Vec<double>& input,
                              const Vec<double>& output_grad, double epsilon,
                              const std::function<void(LayerGrads<double>&)>& tamper = {}) {
  if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
  if (static_cast<std::size_t>(output_grad.size()) != layers.back().out_dim())
    throw DimensionError("output gradient length mismatch");
  ForwardCache<double> cache;
  forward(layers, input, &cache);
  auto [grads, input_grad] = backward(layers, cache, output_grad);
  (void)input_grad;
  if (tamper) tamper(grads);

  auto objective = [&](const Layers<double>& ls) { return output_grad.dot(forward(ls, input)); };
  double worst = 0.0;
  for_each_param(layers, [&](std::size_t k, bool is_weight, Eigen::Index i, double& p) {
    const double saved = p;
    p = saved + epsilon;
    const double up = objective(layers);
    p = saved - epsilon;
    const double down = objective(layers);
    p = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double analytic =
        is_weight ? grads[k].weights.data()[i] : grads[k].biases.data()[i];
    worst = std::max(worst, relative_error(analytic, numeric));
  });
  return worst;
}

}  // namespace setsort
