#pragma once

// Contrastive pretraining of the classifier's hidden layers. Two noisy views
// of each sample form a positive pair; the other samples of the batch act as
// negatives. Pairs are scored with a learned bilinear form a^T W b on the
// output of a projection head that is thrown away afterwards.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "fedstar/error.hpp"
#include "fedstar/matrix.hpp"
#include "fedstar/nn.hpp"
#include "fedstar/seed.hpp"

namespace fedstar {

struct ContrastiveConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  std::size_t embedding_dim = 32;
  double augment_noise = 0.1;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 2) throw ParameterError("pretrain: batch_size must be >= 2");
    if (epochs < 1) throw ParameterError("pretrain: epochs must be >= 1");
    if (embedding_dim < 2) throw ParameterError("pretrain: embedding_dim must be >= 2");
    if (!(augment_noise >= 0.0)) throw ParameterError("pretrain: augment_noise must be >= 0");
    if (!(learning_rate > 0.0)) throw ParameterError("pretrain: learning_rate must be > 0");
  }
};

/// Encoder (the classifier's hidden stack) plus a linear projection head,
/// stored as one network whose last layer is the head, and the bilinear
/// scoring matrix.
struct EncoderWithHead {
  ModelParams network;  // arch {input_dim, hidden_dims, embedding_dim}
  Matrix bilinear;      // [embedding_dim x embedding_dim]

  std::size_t embedding_dim() const noexcept { return bilinear.rows(); }
};

inline EncoderWithHead make_encoder_with_head(const ArchSpec& classifier, std::size_t embedding_dim,
                                              std::uint64_t seed) {
  classifier.validate();
  if (embedding_dim < 2) throw ParameterError("pretrain: embedding_dim must be >= 2");
  ArchSpec arch{classifier.input_dim, classifier.hidden_dims, embedding_dim};
  EncoderWithHead model{init_params(arch, derive_seed(seed, "network")),
                        Matrix(embedding_dim, embedding_dim)};
  Rng rng(derive_seed(seed, "bilinear"));
  const double limit = std::sqrt(3.0 / static_cast<double>(embedding_dim));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& w : model.bilinear.values()) w = dist(rng);
  return model;
}

inline std::pair<std::vector<double>, std::vector<double>> sample_positive_pair(
    std::span<const double> x, double noise, Rng& rng) {
  if (!(noise >= 0.0)) throw ParameterError("sample_positive_pair: noise must be >= 0");
  std::vector<double> a(x.begin(), x.end());
  std::vector<double> b(x.begin(), x.end());
  if (noise == 0.0) return {std::move(a), std::move(b)};
  std::normal_distribution<double> gauss(0.0, noise);
  for (auto& v : a) v += gauss(rng);
  for (auto& v : b) v += gauss(rng);
  return {std::move(a), std::move(b)};
}

inline std::pair<std::vector<double>, std::vector<double>> sample_positive_pair(
    std::span<const double> x, double noise, std::uint64_t seed) {
  Rng rng(seed);
  return sample_positive_pair(x, noise, rng);
}

/// a^T W b.
inline double bilinear_similarity(std::span<const double> a, std::span<const double> b,
                                  const Matrix& w) {
  if (w.rows() != a.size() || w.cols() != b.size()) {
    throw ShapeError("bilinear_similarity: dimensions do not match W");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0) continue;
    auto wr = w.row(i);
    double inner = 0.0;
    for (std::size_t j = 0; j < b.size(); ++j) inner += wr[j] * b[j];
    s += a[i] * inner;
  }
  return s;
}

struct ContrastiveGradient {
  Gradient network;
  Matrix bilinear;
};

struct ContrastiveLoss {
  double loss = 0.0;
  ContrastiveGradient grad;
};

/// InfoNCE over a batch of positive pairs: row i of `view_a` is the anchor,
/// row i of `view_b` its positive and every other row of `view_b` a negative.
/// Returns the mean over anchors of the cross-entropy of the true partner.
inline ContrastiveLoss contrastive_loss_and_gradient(const EncoderWithHead& model,
                                                     const Matrix& view_a, const Matrix& view_b) {
  const std::size_t batch = view_a.rows();
  if (batch < 2) throw DataError("contrastive loss: batch needs at least 2 pairs");
  if (view_b.rows() != batch) throw ShapeError("contrastive loss: view batch sizes differ");
  const std::size_t k = model.embedding_dim();

  ForwardCache ca = forward_cached(model.network, view_a);
  ForwardCache cb = forward_cached(model.network, view_b);
  const Matrix& ea = ca.logits();
  const Matrix& eb = cb.logits();

  // aw = Ea W, scores = aw Eb^T
  Matrix aw(batch, k);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < k; ++r) acc += ea(i, r) * model.bilinear(r, c);
      aw(i, c) = acc;
    }
  }
  Matrix scores(batch, batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += aw(i, c) * eb(j, c);
      scores(i, j) = acc;
    }
  }

  ContrastiveLoss out;
  Matrix dscores = softmax_rows(scores);
  std::vector<int> targets(batch);
  std::iota(targets.begin(), targets.end(), 0);
  out.loss = cross_entropy(dscores, targets);
  for (std::size_t i = 0; i < batch; ++i) {
    dscores(i, i) -= 1.0;
    for (auto& v : dscores.row(i)) v /= static_cast<double>(batch);
  }

  // dEa = dS (Eb W^T), dEb = dS^T (Ea W), dW = Ea^T dS Eb
  Matrix bw(batch, k);
  for (std::size_t j = 0; j < batch; ++j) {
    for (std::size_t r = 0; r < k; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += model.bilinear(r, c) * eb(j, c);
      bw(j, r) = acc;
    }
  }
  Matrix dea(batch, k);
  Matrix deb(batch, k);
  Matrix ds_eb(batch, k);  // dS Eb
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) {
      const double d = dscores(i, j);
      for (std::size_t c = 0; c < k; ++c) {
        dea(i, c) += d * bw(j, c);
        deb(j, c) += d * aw(i, c);
        ds_eb(i, c) += d * eb(j, c);
      }
    }
  }
  out.grad.bilinear = Matrix(k, k);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c < k; ++c) out.grad.bilinear(r, c) += ea(i, r) * ds_eb(i, c);
    }
  }

  out.grad.network = backprop(model.network, ca, dea);
  Gradient gb = backprop(model.network, cb, deb);
  detail::for_each_pair(out.grad.network.layers, gb.layers, [](double& acc, double v) { acc += v; });
  return out;
}

inline double contrastive_loss(const EncoderWithHead& model, const Matrix& view_a,
                               const Matrix& view_b) {
  return contrastive_loss_and_gradient(model, view_a, view_b).loss;
}

/// Builds both views of the selected rows.
inline std::pair<Matrix, Matrix> make_views(const Matrix& data, std::span<const std::size_t> rows,
                                            double noise, Rng& rng) {
  Matrix a(rows.size(), data.cols());
  Matrix b(rows.size(), data.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto [va, vb] = sample_positive_pair(data.row(rows[i]), noise, rng);
    std::copy(va.begin(), va.end(), a.row(i).begin());
    std::copy(vb.begin(), vb.end(), b.row(i).begin());
  }
  return {std::move(a), std::move(b)};
}

/// Mean loss over fixed, seed-determined batches; used to compare a model
/// before and after training on identical inputs.
inline double mean_contrastive_loss(const EncoderWithHead& model, const Matrix& data,
                                    const ContrastiveConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (data.rows() < cfg.batch_size) throw DataError("contrastive loss: fewer samples than batch_size");
  Rng rng(seed);
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
    auto [a, b] = make_views(data, std::span(order).subspan(start, cfg.batch_size), cfg.augment_noise, rng);
    total += contrastive_loss(model, a, b);
    ++batches;
  }
  return total / static_cast<double>(batches);
}

struct PretrainResult {
  ModelParams classifier;   // pretrained hidden layers + fresh output layer
  EncoderWithHead trained;  // kept for diagnostics only
  std::vector<double> epoch_losses;
};

/// Trains encoder, head and W jointly with Adam on full batches of
/// `batch_size` (a trailing partial batch is skipped), then discards head and
/// W and appends a freshly initialised classification layer with
/// `num_classes` outputs.
inline PretrainResult contrastive_pretrain(const Matrix& unlabeled, const ContrastiveConfig& cfg,
                                           EncoderWithHead init, std::size_t num_classes) {
  cfg.validate();
  if (unlabeled.rows() < cfg.batch_size) {
    throw DataError("pretrain: need at least batch_size (" + std::to_string(cfg.batch_size) +
                    ") samples, got " + std::to_string(unlabeled.rows()));
  }
  if (unlabeled.cols() != init.network.arch.input_dim) {
    throw ShapeError("pretrain: feature width does not match encoder input");
  }

  // Network layers followed by W as a bias-free pseudo-layer, so one Adam
  // update covers everything.
  auto pack = [](const std::vector<DenseLayer>& net, const Matrix& w) {
    std::vector<DenseLayer> all = net;
    all.push_back({w, {}});
    return all;
  };
  std::vector<DenseLayer> params = pack(init.network.layers, init.bilinear);
  std::vector<DenseLayer> m = detail::zeros_like(params);
  std::vector<DenseLayer> v = detail::zeros_like(params);
  std::uint64_t step = 0;

  Rng rng(derive_seed(cfg.seed, "batches"));
  std::vector<std::size_t> order(unlabeled.rows());
  std::iota(order.begin(), order.end(), 0);

  PretrainResult result;
  EncoderWithHead model = std::move(init);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
      auto [a, b] = make_views(unlabeled, std::span(order).subspan(start, cfg.batch_size),
                               cfg.augment_noise, rng);
      auto [loss, grad] = contrastive_loss_and_gradient(model, a, b);
      epoch_loss += loss;
      ++batches;
      adam_update(params, pack(grad.network.layers, grad.bilinear), m, v, step, cfg.learning_rate,
                  0.9, 0.999, 1e-8);
      std::copy(params.begin(), params.end() - 1, model.network.layers.begin());
      model.bilinear = params.back().weight;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }

  ArchSpec classifier_arch{model.network.arch.input_dim, model.network.arch.hidden_dims, num_classes};
  ModelParams fresh = init_params(classifier_arch, derive_seed(cfg.seed, "classifier"));
  for (std::size_t i = 0; i + 1 < fresh.layers.size(); ++i) fresh.layers[i] = model.network.layers[i];
  result.classifier = std::move(fresh);
  result.trained = std::move(model);
  return result;
}

}  // namespace fedstar
