#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedstar/data.hpp"
#include "fedstar/error.hpp"
#include "fedstar/nn.hpp"
#include "fedstar/seed.hpp"
#include "fedstar/selftrain.hpp"

namespace fedstar {

enum class TrainingMode { kSupervisedFl, kFedStar };

inline std::string_view to_string(TrainingMode mode) {
  return mode == TrainingMode::kFedStar ? "fedstar" : "supervised_fl";
}

inline TrainingMode parse_mode(std::string_view name) {
  if (name == "fedstar") return TrainingMode::kFedStar;
  if (name == "supervised_fl") return TrainingMode::kSupervisedFl;
  throw ParameterError("unknown mode '" + std::string(name) + "'");
}

struct FederationConfig {
  std::size_t num_clients = 10;
  std::size_t rounds = 60;
  double participation = 0.8;
  SelfTrainConfig selftrain;
  TrainingMode mode = TrainingMode::kFedStar;
  std::uint64_t seed = 0;

  std::size_t cohort_size() const {
    const auto k = static_cast<std::size_t>(std::llround(participation * static_cast<double>(num_clients)));
    return std::max<std::size_t>(1, k);
  }

  void validate() const {
    if (num_clients < 1) throw ParameterError("federation: N must be >= 1");
    if (!(participation > 0.0 && participation <= 1.0)) {
      throw ParameterError("federation: q must lie in (0, 1]");
    }
    selftrain.validate();
  }
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<int> participating;
  double global_test_accuracy = 0.0;
  double mean_train_loss = 0.0;
  double pseudo_acceptance_rate = 0.0;
  double tau = 0.0;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct FederationHistory {
  std::vector<RoundRecord> records;
  ModelParams final_params;
  FederationConfig config;

  double final_accuracy() const { return records.empty() ? 0.0 : records.back().global_test_accuracy; }
};

/// max(1, round(q N)) distinct ids, uniform without replacement, ascending.
inline std::vector<int> sample_clients(std::size_t num_clients, double participation,
                                       std::uint64_t round_seed) {
  if (num_clients < 1) throw ParameterError("sample_clients: N must be >= 1");
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(participation * static_cast<double>(num_clients))), 1,
      num_clients);
  std::vector<int> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(round_seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct ClientUpdate {
  ModelParams params;
  std::size_t weight = 1;  // n_k
};

/// Weighted mean sum_k (n_k / sum n) theta_k, accumulated in list order.
inline ModelParams fedavg_aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw DataError("fedavg: no client updates");
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.weight < 1) throw ParameterError("fedavg: client weight must be >= 1");
    if (!(u.params.arch == updates.front().params.arch) ||
        !detail::same_shape(u.params.layers, updates.front().params.layers)) {
      throw ShapeError("fedavg: client parameter shapes differ");
    }
    total += static_cast<double>(u.weight);
  }
  ModelParams out{updates.front().params.arch, detail::zeros_like(updates.front().params.layers)};
  for (const auto& u : updates) {
    const double w = static_cast<double>(u.weight) / total;
    detail::for_each_pair(out.layers, u.params.layers, [w](double& acc, double v) { acc += w * v; });
  }
  return out;
}

namespace detail {

inline double scheduled_tau(std::size_t round, const FederationConfig& cfg) {
  // The ramp spans the rounds actually played, reaching tau_max on the last.
  const std::size_t span = cfg.rounds > 1 ? cfg.rounds - 1 : 1;
  return threshold_at(round, span, cfg.selftrain.tau_min, cfg.selftrain.tau_max);
}

inline std::uint64_t client_seed(const FederationConfig& cfg, std::size_t round, int client_id) {
  return derive_seed(cfg.seed, "round", round, static_cast<std::uint64_t>(client_id));
}

}  // namespace detail

/// Server loop: per round sample a cohort, run local training from the current
/// global model, aggregate with FedAvg and evaluate on `test`.
inline FederationHistory run_federation(const FederationConfig& cfg,
                                        const std::vector<ClientDataset>& clients,
                                        const Dataset& test, const ModelParams& init) {
  cfg.validate();
  if (clients.size() != cfg.num_clients) {
    throw ParameterError("federation: expected " + std::to_string(cfg.num_clients) +
                         " clients, got " + std::to_string(clients.size()));
  }
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (clients[i].client_id != static_cast<int>(i)) {
      throw ParameterError("federation: client ids must be 0..N-1 in order");
    }
    if (clients[i].num_labeled() == 0) {
      throw DataError("federation: client " + std::to_string(i) + " has no labeled data");
    }
  }
  validate_params(init);

  FederationHistory history{{}, init, cfg};
  ModelParams global = init;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RoundRecord rec;
    rec.round = r;
    rec.tau = detail::scheduled_tau(r, cfg);
    rec.participating = sample_clients(cfg.num_clients, cfg.participation,
                                       derive_seed(cfg.seed, "cohort", r));

    std::vector<ClientUpdate> updates;
    std::size_t considered = 0;
    std::size_t accepted = 0;
    double loss_sum = 0.0;
    for (int id : rec.participating) {
      const auto& client = clients[static_cast<std::size_t>(id)];
      const auto seed = detail::client_seed(cfg, r, id);
      ClientUpdateResult result =
          cfg.mode == TrainingMode::kFedStar
              ? client_update(global, client, cfg.selftrain, rec.tau, seed)
              : supervised_update_with_stats(global, client.labeled, cfg.selftrain, seed);
      const std::size_t weight =
          cfg.mode == TrainingMode::kFedStar ? client.num_total() : client.num_labeled();
      considered += result.stats.pseudo_considered;
      accepted += result.stats.pseudo_accepted;
      loss_sum += result.stats.mean_loss;
      updates.push_back({std::move(result.params), weight});
    }
    global = fedavg_aggregate(updates);
    rec.mean_train_loss = loss_sum / static_cast<double>(updates.size());
    rec.pseudo_acceptance_rate =
        considered == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(considered);
    rec.global_test_accuracy = test.empty() ? 0.0 : evaluate(global, test);
    history.records.push_back(std::move(rec));
  }
  history.final_params = std::move(global);
  return history;
}

/// Pooled-data baseline. Training is chunked into R blocks of E epochs with a
/// fresh optimizer and the seed a single federated client 0 would receive in
/// that round, so it coincides with run_federation at N = 1, q = 1.
inline ModelParams centralized_train(const Dataset& dataset, const FederationConfig& cfg,
                                     const ModelParams& init) {
  cfg.validate();
  if (dataset.empty()) throw DataError("centralized_train: empty dataset");
  ModelParams params = init;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    params = supervised_update(std::move(params), dataset, cfg.selftrain, detail::client_seed(cfg, r, 0));
  }
  return params;
}

namespace detail {

inline std::string fixed6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

}  // namespace detail

/// One row per round: round,tau,accuracy,loss,acceptance_rate,participants.
inline void write_history_csv(std::ostream& os, const FederationHistory& history) {
  os << "round,tau,accuracy,loss,acceptance_rate,participants\n";
  for (const auto& rec : history.records) {
    os << rec.round << ',' << detail::fixed6(rec.tau) << ',' << detail::fixed6(rec.global_test_accuracy)
       << ',' << detail::fixed6(rec.mean_train_loss) << ',' << detail::fixed6(rec.pseudo_acceptance_rate)
       << ',';
    for (std::size_t i = 0; i < rec.participating.size(); ++i) {
      if (i) os << ';';
      os << rec.participating[i];
    }
    os << '\n';
  }
  if (!os) throw IoError("write_history_csv: stream failure");
}

}  // namespace fedstar
