#pragma once

// Feed-forward classifier with ReLU hidden layers, exact backpropagation and
// Adam. Every function here is pure: parameters and optimizer state go in by
// value or const reference and come back out.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedstar/error.hpp"
#include "fedstar/matrix.hpp"
#include "fedstar/seed.hpp"

namespace fedstar {

struct ArchSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t num_classes = 0;

  void validate() const {
    if (input_dim < 1) throw ParameterError("arch: input_dim must be >= 1");
    if (num_classes < 2) throw ParameterError("arch: num_classes must be >= 2");
    for (auto h : hidden_dims) {
      if (h < 1) throw ParameterError("arch: hidden dimensions must be >= 1");
    }
  }

  /// (out, in) of every dense layer, input to output.
  std::vector<std::pair<std::size_t, std::size_t>> layer_shapes() const {
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    std::size_t in = input_dim;
    for (auto h : hidden_dims) {
      shapes.emplace_back(h, in);
      in = h;
    }
    shapes.emplace_back(num_classes, in);
    return shapes;
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct DenseLayer {
  Matrix weight;  // [out x in]
  std::vector<double> bias;

  std::size_t out_dim() const noexcept { return weight.rows(); }
  std::size_t in_dim() const noexcept { return weight.cols(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct ModelParams {
  ArchSpec arch;
  std::vector<DenseLayer> layers;

  std::size_t num_parameters() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Shape-identical to the ModelParams it differentiates.
struct Gradient {
  std::vector<DenseLayer> layers;

  friend bool operator==(const Gradient&, const Gradient&) = default;
};

namespace detail {

inline bool same_shape(const std::vector<DenseLayer>& a, const std::vector<DenseLayer>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].weight.rows() != b[i].weight.rows() || a[i].weight.cols() != b[i].weight.cols() ||
        a[i].bias.size() != b[i].bias.size()) {
      return false;
    }
  }
  return true;
}

inline std::vector<DenseLayer> zeros_like(const std::vector<DenseLayer>& layers) {
  std::vector<DenseLayer> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    out.push_back({Matrix(l.weight.rows(), l.weight.cols()), std::vector<double>(l.bias.size())});
  }
  return out;
}

/// Visits every scalar of two shape-identical layer lists in a fixed order.
template <typename Fn>
void for_each_pair(std::vector<DenseLayer>& a, const std::vector<DenseLayer>& b, Fn&& fn) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto& wa = a[i].weight.values();
    const auto& wb = b[i].weight.values();
    for (std::size_t j = 0; j < wa.size(); ++j) fn(wa[j], wb[j]);
    for (std::size_t j = 0; j < a[i].bias.size(); ++j) fn(a[i].bias[j], b[i].bias[j]);
  }
}

}  // namespace detail

inline Gradient zero_gradient(const ModelParams& params) {
  return {detail::zeros_like(params.layers)};
}

/// Checks that layer shapes chain from input_dim to num_classes and that every
/// entry is finite.
inline void validate_params(const ModelParams& params) {
  params.arch.validate();
  auto shapes = params.arch.layer_shapes();
  if (shapes.size() != params.layers.size()) throw ShapeError("params: wrong layer count");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& l = params.layers[i];
    if (l.weight.rows() != shapes[i].first || l.weight.cols() != shapes[i].second ||
        l.bias.size() != shapes[i].first) {
      throw ShapeError("params: layer " + std::to_string(i) + " does not match arch");
    }
    for (double v : l.weight.values()) {
      if (!std::isfinite(v)) throw ParameterError("params: non-finite weight");
    }
    for (double v : l.bias) {
      if (!std::isfinite(v)) throw ParameterError("params: non-finite bias");
    }
  }
}

/// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
inline ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  ModelParams params{arch, {}};
  for (auto [out, in] : arch.layer_shapes()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer{Matrix(out, in), std::vector<double>(out, 0.0)};
    for (auto& w : layer.weight.values()) w = dist(rng);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

/// Activations kept for backpropagation. `activations[0]` is the input batch,
/// `activations[i+1]` the output of layer i (post-ReLU for hidden layers, raw
/// logits for the last).
struct ForwardCache {
  std::vector<Matrix> activations;

  const Matrix& logits() const { return activations.back(); }
};

namespace detail {

inline Matrix dense(const DenseLayer& layer, const Matrix& x, bool relu) {
  const std::size_t out = layer.out_dim();
  const std::size_t in = layer.in_dim();
  Matrix y(x.rows(), out);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    auto xr = x.row(b);
    for (std::size_t o = 0; o < out; ++o) {
      auto wr = layer.weight.row(o);
      double acc = layer.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      y(b, o) = relu ? std::max(acc, 0.0) : acc;
    }
  }
  return y;
}

inline void check_batch(const ModelParams& params, const Matrix& batch) {
  if (params.layers.empty()) throw ShapeError("forward: model has no layers");
  if (batch.cols() != params.layers.front().in_dim()) {
    throw ShapeError("forward: batch has " + std::to_string(batch.cols()) +
                     " columns, model expects " + std::to_string(params.layers.front().in_dim()));
  }
}

}  // namespace detail

inline ForwardCache forward_cached(const ModelParams& params, const Matrix& batch) {
  detail::check_batch(params, batch);
  ForwardCache cache;
  cache.activations.reserve(params.layers.size() + 1);
  cache.activations.push_back(batch);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const bool hidden = i + 1 < params.layers.size();
    cache.activations.push_back(detail::dense(params.layers[i], cache.activations.back(), hidden));
  }
  return cache;
}

/// Logits [B x C] for a batch [B x input_dim].
inline Matrix forward(const ModelParams& params, const Matrix& batch) {
  detail::check_batch(params, batch);
  Matrix x = batch;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    x = detail::dense(params.layers[i], x, i + 1 < params.layers.size());
  }
  return x;
}

/// Backpropagates d(loss)/d(logits) through the cached forward pass.
inline Gradient backprop(const ModelParams& params, const ForwardCache& cache,
                         const Matrix& dlogits) {
  const Matrix& logits = cache.logits();
  if (dlogits.rows() != logits.rows() || dlogits.cols() != logits.cols()) {
    throw ShapeError("backprop: output gradient shape mismatch");
  }
  Gradient grad = zero_gradient(params);
  Matrix delta = dlogits;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const DenseLayer& layer = params.layers[li];
    const Matrix& input = cache.activations[li];
    DenseLayer& g = grad.layers[li];
    for (std::size_t b = 0; b < delta.rows(); ++b) {
      auto d = delta.row(b);
      auto x = input.row(b);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        if (d[o] == 0.0) continue;
        g.bias[o] += d[o];
        auto gw = g.weight.row(o);
        for (std::size_t i = 0; i < layer.in_dim(); ++i) gw[i] += d[o] * x[i];
      }
    }
    if (li == 0) break;
    Matrix next(delta.rows(), layer.in_dim());
    for (std::size_t b = 0; b < delta.rows(); ++b) {
      auto d = delta.row(b);
      auto act = input.row(b);  // post-ReLU output of the previous layer
      auto nd = next.row(b);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        if (d[o] == 0.0) continue;
        auto wr = layer.weight.row(o);
        for (std::size_t i = 0; i < layer.in_dim(); ++i) nd[i] += d[o] * wr[i];
      }
      for (std::size_t i = 0; i < layer.in_dim(); ++i) {
        if (act[i] <= 0.0) nd[i] = 0.0;
      }
    }
    delta = std::move(next);
  }
  return grad;
}

/// Temperature-scaled softmax, max-subtracted.
inline std::vector<double> softmax_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be > 0");
  if (logits.empty()) throw ShapeError("softmax: empty logits");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp((logits[i] - peak) / temperature);
    total += probs[i];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

inline Matrix softmax_rows(const Matrix& logits, double temperature = 1.0) {
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto p = softmax_temperature(logits.row(r), temperature);
    std::copy(p.begin(), p.end(), probs.row(r).begin());
  }
  return probs;
}

/// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-likelihood of `targets` under row-wise `probs`.
inline double cross_entropy(const Matrix& probs, std::span<const int> targets) {
  if (probs.rows() == 0) throw DataError("cross_entropy: empty batch");
  if (targets.size() != probs.rows()) throw ShapeError("cross_entropy: target count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= probs.cols()) {
      throw ParameterError("cross_entropy: target out of range");
    }
    total -= std::log(std::max(probs(i, static_cast<std::size_t>(t)), kProbabilityFloor));
  }
  return total / static_cast<double>(probs.rows());
}

/// Inputs of the combined local objective
///   CE(labels | labeled) + beta * CE(pseudo_labels | pseudo)
/// where each term is a mean over its own batch. An empty pseudo batch
/// contributes nothing.
struct LossSpec {
  Matrix labeled_features;
  std::vector<int> labels;
  Matrix pseudo_features;
  std::vector<int> pseudo_labels;
  double beta = 0.0;
  /// L2 penalty 0.5 * weight_decay * |W|^2 on weight matrices (biases exempt).
  double weight_decay = 0.0;
};

struct LossAndGradient {
  double loss = 0.0;
  Gradient grad;
};

namespace detail {

/// Adds scale * d(mean CE)/d(params) to `grad`, returns the mean CE.
inline double accumulate_ce(const ModelParams& params, const Matrix& features,
                            std::span<const int> targets, double scale, Gradient& grad) {
  if (targets.size() != features.rows()) throw ShapeError("loss: target count mismatch");
  ForwardCache cache = forward_cached(params, features);
  Matrix probs = softmax_rows(cache.logits());
  const double loss = cross_entropy(probs, targets);
  if (scale == 0.0) return loss;
  const double per_sample = scale / static_cast<double>(features.rows());
  Matrix dlogits = probs;
  for (std::size_t i = 0; i < dlogits.rows(); ++i) {
    dlogits(i, static_cast<std::size_t>(targets[i])) -= 1.0;
    for (auto& v : dlogits.row(i)) v *= per_sample;
  }
  Gradient part = backprop(params, cache, dlogits);
  for_each_pair(grad.layers, part.layers, [](double& acc, double v) { acc += v; });
  return loss;
}

}  // namespace detail

inline LossAndGradient loss_and_gradient(const ModelParams& params, const LossSpec& spec) {
  if (spec.labeled_features.rows() == 0) throw DataError("loss: empty labeled batch");
  LossAndGradient out{0.0, zero_gradient(params)};
  out.loss = detail::accumulate_ce(params, spec.labeled_features, spec.labels, 1.0, out.grad);
  if (spec.beta != 0.0 && spec.pseudo_features.rows() > 0) {
    out.loss += spec.beta * detail::accumulate_ce(params, spec.pseudo_features,
                                                  spec.pseudo_labels, spec.beta, out.grad);
  }
  if (spec.weight_decay != 0.0) {
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
      const auto& w = params.layers[li].weight.values();
      auto& g = out.grad.layers[li].weight.values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        out.loss += 0.5 * spec.weight_decay * w[j] * w[j];
        g[j] += spec.weight_decay * w[j];
      }
    }
  }
  return out;
}

/// Scalar value of the combined objective, without the gradient.
inline double combined_loss(const ModelParams& params, const LossSpec& spec) {
  if (spec.labeled_features.rows() == 0) throw DataError("loss: empty labeled batch");
  double loss = cross_entropy(softmax_rows(forward(params, spec.labeled_features)), spec.labels);
  if (spec.beta != 0.0 && spec.pseudo_features.rows() > 0) {
    loss += spec.beta *
            cross_entropy(softmax_rows(forward(params, spec.pseudo_features)), spec.pseudo_labels);
  }
  if (spec.weight_decay != 0.0) {
    for (const auto& l : params.layers) {
      for (double w : l.weight.values()) loss += 0.5 * spec.weight_decay * w * w;
    }
  }
  return loss;
}

inline Gradient backward(const ModelParams& params, const LossSpec& spec) {
  return loss_and_gradient(params, spec).grad;
}

struct OptimizerState {
  Gradient first_moment;
  Gradient second_moment;
  std::uint64_t step = 0;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerState fresh(const ModelParams& params, double learning_rate = 0.001) {
    OptimizerState s;
    s.first_moment = zero_gradient(params);
    s.second_moment = zero_gradient(params);
    s.learning_rate = learning_rate;
    return s;
  }
};

/// Bias-corrected Adam on the flat layer lists. Usable on any network sharing
/// the DenseLayer layout (classifiers and contrastive encoders alike).
inline void adam_update(std::vector<DenseLayer>& params, const std::vector<DenseLayer>& grad,
                        std::vector<DenseLayer>& m, std::vector<DenseLayer>& v,
                        std::uint64_t& step, double lr, double beta1, double beta2,
                        double epsilon) {
  if (!detail::same_shape(params, grad) || !detail::same_shape(params, m) ||
      !detail::same_shape(params, v)) {
    throw ShapeError("adam: parameter/gradient/moment shapes differ");
  }
  ++step;
  bool all_zero = true;
  for (const auto& l : grad) {
    for (double g : l.weight.values()) all_zero = all_zero && g == 0.0;
    for (double g : l.bias) all_zero = all_zero && g == 0.0;
  }
  const double correction1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t li = 0; li < params.size(); ++li) {
    auto update = [&](double& p, double g, double& m1, double& m2) {
      m1 = beta1 * m1 + (1.0 - beta1) * g;
      m2 = beta2 * m2 + (1.0 - beta2) * g * g;
      // An identically zero gradient leaves parameters in place even when the
      // moments still carry momentum.
      if (all_zero) return;
      const double mhat = m1 / correction1;
      const double vhat = m2 / correction2;
      p -= lr * mhat / (std::sqrt(vhat) + epsilon);
    };
    auto& pw = params[li].weight.values();
    const auto& gw = grad[li].weight.values();
    auto& mw = m[li].weight.values();
    auto& vw = v[li].weight.values();
    for (std::size_t j = 0; j < pw.size(); ++j) update(pw[j], gw[j], mw[j], vw[j]);
    for (std::size_t j = 0; j < params[li].bias.size(); ++j) {
      update(params[li].bias[j], grad[li].bias[j], m[li].bias[j], v[li].bias[j]);
    }
  }
}

inline std::pair<ModelParams, OptimizerState> adam_step(ModelParams params, const Gradient& grad,
                                                        OptimizerState state) {
  adam_update(params.layers, grad.layers, state.first_moment.layers, state.second_moment.layers,
              state.step, state.learning_rate, state.beta1, state.beta2, state.epsilon);
  return {std::move(params), std::move(state)};
}

/// Predicted class per row (argmax of logits, ties to the lowest index).
inline std::vector<int> predict(const ModelParams& params, const Matrix& features) {
  Matrix logits = forward(params, features);
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = static_cast<int>(argmax(logits.row(i)));
  return out;
}

inline double accuracy(const ModelParams& params, const Matrix& features,
                       std::span<const int> labels) {
  if (features.rows() == 0) throw DataError("evaluate: empty dataset");
  if (labels.size() != features.rows()) throw ShapeError("evaluate: label count mismatch");
  auto predicted = predict(params, features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace fedstar
