#pragma once

// Local self-training: temperature-scaled pseudo-labels filtered by a
// cosine-scheduled confidence threshold, trained jointly with the labeled
// cross-entropy in a single backward pass per step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <tuple>
#include <vector>

#include "fedstar/data.hpp"
#include "fedstar/error.hpp"
#include "fedstar/nn.hpp"
#include "fedstar/seed.hpp"

namespace fedstar {

/// Which softmax maximum is compared against the threshold.
enum class ConfidenceSource { kScaled, kUnscaled };

struct SelfTrainConfig {
  double beta = 0.5;
  double temperature = 4.0;
  double tau_min = 0.5;
  double tau_max = 0.9;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 1;
  double learning_rate = 0.001;
  double weight_decay = 0.0;
  ConfidenceSource confidence = ConfidenceSource::kScaled;

  void validate() const {
    if (!(beta >= 0.0)) throw ParameterError("selftrain: beta must be >= 0");
    if (!(temperature > 0.0)) throw ParameterError("selftrain: T must be > 0");
    if (!(tau_min > 0.0 && tau_min < 1.0)) throw ParameterError("selftrain: tau_min must lie in (0, 1)");
    if (!(tau_max > tau_min && tau_max <= 1.0)) {
      throw ParameterError("selftrain: tau_max must lie in (tau_min, 1]");
    }
    if (batch_size < 1) throw ParameterError("selftrain: batch_size must be >= 1");
    if (local_epochs < 1) throw ParameterError("selftrain: E must be >= 1");
    if (!(learning_rate > 0.0)) throw ParameterError("selftrain: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ParameterError("selftrain: weight_decay must be >= 0");
  }
};

struct PseudoLabelOutcome {
  std::size_t sample_index = 0;
  int predicted_class = 0;
  double confidence = 0.0;
  bool accepted = false;
};

inline PseudoLabelOutcome pseudo_label(std::span<const double> logits, double temperature,
                                       double tau,
                                       ConfidenceSource source = ConfidenceSource::kScaled) {
  auto probs = softmax_temperature(logits, source == ConfidenceSource::kScaled ? temperature : 1.0);
  const std::size_t cls = argmax(probs);
  PseudoLabelOutcome out;
  out.predicted_class = static_cast<int>(cls);
  out.confidence = probs[cls];
  out.accepted = out.confidence >= tau;
  return out;
}

/// Cosine ramp from tau_min at r = 0 to tau_max at r = R.
inline double threshold_at(std::size_t round, std::size_t total_rounds, double tau_min,
                           double tau_max) {
  if (total_rounds < 1) throw ParameterError("threshold_at: R must be >= 1");
  if (round > total_rounds) throw ParameterError("threshold_at: round outside [0, R]");
  if (round == 0) return tau_min;
  if (round == total_rounds) return tau_max;
  const double phase = std::numbers::pi * static_cast<double>(round) / static_cast<double>(total_rounds);
  return tau_max - (tau_max - tau_min) * (1.0 + std::cos(phase)) / 2.0;
}

struct ClientStats {
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::size_t pseudo_considered = 0;
  std::size_t pseudo_accepted = 0;

  double acceptance_rate() const noexcept {
    return pseudo_considered == 0
               ? 0.0
               : static_cast<double>(pseudo_accepted) / static_cast<double>(pseudo_considered);
  }
};

struct ClientUpdateResult {
  ModelParams params;
  ClientStats stats;
};

namespace detail {

/// Endless stream of index batches over 0..n-1. A batch never straddles the
/// end of a pass: the last batch of a pass may be short, and the order is
/// reshuffled before the next pass starts.
class BatchCycler {
 public:
  BatchCycler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : order_(n), batch_size_(batch_size), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    if (order_.empty()) return {};
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    const std::size_t stop = std::min(pos_ + batch_size_, order_.size());
    std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                   order_.begin() + static_cast<std::ptrdiff_t>(stop));
    pos_ = stop;
    return batch;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
  Rng rng_;
};

}  // namespace detail

/// Optimizer steps per local epoch of `client_update`: the larger of the
/// labeled and unlabeled batch counts, or the labeled count alone when the
/// unlabeled data takes no part.
inline std::size_t paired_steps_per_epoch(std::size_t num_labeled, std::size_t num_unlabeled,
                                          const SelfTrainConfig& cfg) {
  const std::size_t labeled_steps = (num_labeled + cfg.batch_size - 1) / cfg.batch_size;
  if (cfg.beta == 0.0 || num_unlabeled == 0) return labeled_steps;
  return std::max(labeled_steps, (num_unlabeled + cfg.batch_size - 1) / cfg.batch_size);
}

/// One round of local training on a client.
///
/// An epoch sweeps the unlabeled pool once in batches of `batch_size`; each
/// unlabeled batch is paired with the next batch of a labeled stream that
/// reshuffles whenever it wraps (a client with more labeled than unlabeled
/// batches runs one full labeled pass instead). Pseudo-labels come from the
/// current parameters before the step; rejected samples are dropped and the
/// rest enter the loss with weight beta. Every pair yields one Adam step.
/// The Adam state lives only for the duration of the call.
///
/// With beta = 0 or an empty pool the unlabeled data takes no part at all and
/// the result equals `supervised_update`. A threshold that rejects everything
/// reproduces `supervised_update` run for `paired_steps_per_epoch` steps.
inline ClientUpdateResult client_update(ModelParams params, const ClientDataset& client,
                                        const SelfTrainConfig& cfg, double tau,
                                        std::uint64_t seed) {
  cfg.validate();
  if (client.num_labeled() == 0) {
    throw DataError("client " + std::to_string(client.client_id) + " has no labeled data");
  }
  const bool use_unlabeled = cfg.beta > 0.0 && client.num_unlabeled() > 0;
  const std::size_t n_labeled = client.num_labeled();

  OptimizerState opt = OptimizerState::fresh(params, cfg.learning_rate);
  detail::BatchCycler labeled_stream(n_labeled, cfg.batch_size, derive_seed(seed, "labeled"));
  detail::BatchCycler unlabeled_stream(client.num_unlabeled(), cfg.batch_size,
                                       derive_seed(seed, "unlabeled"));
  const std::size_t steps_per_epoch = paired_steps_per_epoch(n_labeled, client.num_unlabeled(), cfg);

  ClientStats stats;
  double loss_sum = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      LossSpec spec;
      spec.beta = cfg.beta;
      spec.weight_decay = cfg.weight_decay;

      if (use_unlabeled) {
        const auto uidx = unlabeled_stream.next();
        Matrix batch = client.unlabeled_features.select_rows(uidx);
        Matrix logits = forward(params, batch);
        std::vector<std::size_t> accepted;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
          auto outcome = pseudo_label(logits.row(i), cfg.temperature, tau, cfg.confidence);
          if (outcome.accepted) {
            accepted.push_back(i);
            spec.pseudo_labels.push_back(outcome.predicted_class);
          }
        }
        stats.pseudo_considered += uidx.size();
        stats.pseudo_accepted += accepted.size();
        spec.pseudo_features = batch.select_rows(accepted);
      }

      const auto idx = labeled_stream.next();
      spec.labeled_features = client.labeled.features.select_rows(idx);
      spec.labels.reserve(idx.size());
      for (auto i : idx) spec.labels.push_back(client.labeled.labels[i]);

      auto [loss, grad] = loss_and_gradient(params, spec);
      loss_sum += loss;
      ++stats.steps;
      adam_update(params.layers, grad.layers, opt.first_moment.layers, opt.second_moment.layers,
                  opt.step, opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon);
    }
  }
  stats.mean_loss = stats.steps == 0 ? 0.0 : loss_sum / static_cast<double>(stats.steps);
  return {std::move(params), stats};
}

/// Labeled-only local training: E epochs of minibatch Adam on the supervised
/// cross-entropy. An epoch is one shuffled pass over `labeled` unless
/// `steps_per_epoch` asks for more, in which case the batch stream keeps
/// cycling with a reshuffle on every wrap.
inline ClientUpdateResult supervised_update_with_stats(ModelParams params, const Dataset& labeled,
                                                       const SelfTrainConfig& cfg, std::uint64_t seed,
                                                       std::size_t steps_per_epoch = 0) {
  cfg.validate();
  if (labeled.empty()) throw DataError("supervised_update: empty labeled set");
  if (steps_per_epoch == 0) steps_per_epoch = (labeled.size() + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerState opt = OptimizerState::fresh(params, cfg.learning_rate);
  detail::BatchCycler stream(labeled.size(), cfg.batch_size, derive_seed(seed, "labeled"));

  ClientStats stats;
  double loss_sum = 0.0;
  for (std::size_t step = 0; step < cfg.local_epochs * steps_per_epoch; ++step) {
    const auto idx = stream.next();
    LossSpec spec;
    spec.labeled_features = labeled.features.select_rows(idx);
    for (auto i : idx) spec.labels.push_back(labeled.labels[i]);
    spec.weight_decay = cfg.weight_decay;
    auto [loss, grad] = loss_and_gradient(params, spec);
    loss_sum += loss;
    ++stats.steps;
    std::tie(params, opt) = adam_step(std::move(params), grad, std::move(opt));
  }
  stats.mean_loss = stats.steps == 0 ? 0.0 : loss_sum / static_cast<double>(stats.steps);
  return {std::move(params), stats};
}

inline ModelParams supervised_update(ModelParams params, const Dataset& labeled,
                                     const SelfTrainConfig& cfg, std::uint64_t seed,
                                     std::size_t steps_per_epoch = 0) {
  return supervised_update_with_stats(std::move(params), labeled, cfg, seed, steps_per_epoch).params;
}

}  // namespace fedstar
