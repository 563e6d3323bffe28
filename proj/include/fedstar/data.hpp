#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fedstar/error.hpp"
#include "fedstar/matrix.hpp"
#include "fedstar/nn.hpp"
#include "fedstar/seed.hpp"

namespace fedstar {

struct Dataset {
  Matrix features;  // [N x d]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t dim() const noexcept { return features.cols(); }

  void validate() const {
    if (features.rows() != labels.size()) throw ShapeError("dataset: feature/label count mismatch");
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw ParameterError("dataset: label " + std::to_string(y) + " outside [0, C)");
      }
    }
    for (double v : features.values()) {
      if (!std::isfinite(v)) throw ParameterError("dataset: non-finite feature");
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{features.select_rows(indices), {}, num_classes};
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels[i]);
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Labeled fraction L and kept fraction U of the unlabeled remainder.
struct SplitSpec {
  double labeled_fraction = 1.0;
  double unlabeled_fraction = 1.0;

  void validate() const {
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
      throw ParameterError("split: L must lie in (0, 1]");
    }
    if (!(unlabeled_fraction > 0.0 && unlabeled_fraction <= 1.0)) {
      throw ParameterError("split: U must lie in (0, 1]");
    }
  }
};

struct PartitionSpec {
  std::size_t num_clients = 1;
  double sigma = 0.0;  // quantity skew, weights ~ U[1-2 sigma, 1+2 sigma]
  std::optional<std::size_t> class_mu;
  double class_sigma_c = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 1) throw ParameterError("partition: N must be >= 1");
    if (!(sigma >= 0.0 && sigma <= 0.5)) throw ParameterError("partition: sigma must lie in [0, 0.5]");
    if (!(class_sigma_c >= 0.0 && class_sigma_c <= 0.5)) {
      throw ParameterError("partition: class_sigma_c must lie in [0, 0.5]");
    }
    if (class_mu && *class_mu < 1) throw ParameterError("partition: class_mu must be >= 1");
  }
};

struct ClientDataset {
  Dataset labeled;
  Matrix unlabeled_features;
  int client_id = 0;

  std::size_t num_labeled() const noexcept { return labeled.size(); }
  std::size_t num_unlabeled() const noexcept { return unlabeled_features.rows(); }
  std::size_t num_total() const noexcept { return num_labeled() + num_unlabeled(); }

  friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

inline double evaluate(const ModelParams& params, const Dataset& dataset) {
  return accuracy(params, dataset.features, dataset.labels);
}

/// Balanced Gaussian clusters: class means uniform in [-1, 1]^d, isotropic
/// noise with standard deviation `spread`. Class sizes differ by at most one.
inline Dataset make_blobs(std::size_t n, std::size_t num_classes, std::size_t dim, double spread,
                          std::uint64_t seed) {
  if (num_classes < 2) throw ParameterError("make_blobs: C must be >= 2");
  if (n < num_classes) throw ParameterError("make_blobs: n must be >= C");
  if (dim < 2) throw ParameterError("make_blobs: d must be >= 2");
  if (!(spread >= 0.0)) throw ParameterError("make_blobs: spread must be >= 0");

  Rng center_rng(derive_seed(seed, "centers"));
  std::uniform_real_distribution<double> box(-1.0, 1.0);
  Matrix centers(num_classes, dim);
  for (auto& v : centers.values()) v = box(center_rng);

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % num_classes);
  Rng sample_rng(derive_seed(seed, "samples"));
  std::shuffle(labels.begin(), labels.end(), sample_rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset out{Matrix(n, dim), std::move(labels), num_classes};
  for (std::size_t i = 0; i < n; ++i) {
    auto c = centers.row(static_cast<std::size_t>(out.labels[i]));
    auto x = out.features.row(i);
    for (std::size_t j = 0; j < dim; ++j) x[j] = c[j] + spread * noise(sample_rng);
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& d) {
  std::vector<std::vector<std::size_t>> by_class(d.num_classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
  return by_class;
}

/// Largest-remainder apportionment of `total` items proportional to
/// `weights`; remainder ties go to the lower index.
inline std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

/// Share allocation for client partitioning: floor(w_k * n) each, the
/// rounding residue handed out one sample per client in ascending id order.
/// With `min_one`, every client is first given one sample when n allows.
inline std::vector<std::size_t> allocate_shares(std::size_t n, const std::vector<double>& weights,
                                                bool min_one = false) {
  const std::size_t k = weights.size();
  std::vector<std::size_t> counts(k, 0);
  std::size_t base = 0;
  if (min_one && n >= k) {
    std::fill(counts.begin(), counts.end(), 1);
    base = k;
  }
  const std::size_t rest = n - base;
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto share = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * weights[i] / sum));
    counts[i] += share;
    assigned += share;
  }
  for (std::size_t i = 0; assigned < rest; i = (i + 1) % k, ++assigned) ++counts[i];
  return counts;
}

/// Per-client weights 1 + 2 sigma (2u - 1), u ~ U[0, 1).
inline std::vector<double> quantity_weights(std::size_t num_clients, double sigma, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> w(num_clients);
  for (auto& v : w) v = 1.0 + 2.0 * sigma * (2.0 * unit(rng) - 1.0);
  return w;
}

/// Shuffles 0..n-1 and cuts it into consecutive slices of the given sizes;
/// each slice is returned in ascending order.
inline std::vector<std::vector<std::size_t>> random_slices(std::size_t n,
                                                           const std::vector<std::size_t>& sizes,
                                                           Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> slices;
  std::size_t pos = 0;
  for (auto s : sizes) {
    std::vector<std::size_t> slice(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                   order.begin() + static_cast<std::ptrdiff_t>(pos + s));
    std::sort(slice.begin(), slice.end());
    slices.push_back(std::move(slice));
    pos += s;
  }
  return slices;
}

}  // namespace detail

struct LabeledSplit {
  Dataset labeled;
  Dataset unlabeled;  // labels retained for bookkeeping; never used for training
};

/// Class-ratio-preserving labeled subset of size round(L*N) (at least one
/// sample per present class), then a uniform U-fraction of the remainder as
/// the unlabeled pool. The unused remainder is discarded.
inline LabeledSplit split_labeled(const Dataset& dataset, const SplitSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = dataset.size();
  const double wanted = spec.labeled_fraction * static_cast<double>(n);
  if (wanted < static_cast<double>(dataset.num_classes)) {
    throw ParameterError("split: L*N = " + std::to_string(wanted) + " is below C = " +
                         std::to_string(dataset.num_classes));
  }
  const auto by_class = detail::indices_by_class(dataset);
  std::vector<double> class_weights;
  for (const auto& idx : by_class) class_weights.push_back(static_cast<double>(idx.size()));
  const auto total = static_cast<std::size_t>(std::llround(wanted));
  auto quota = detail::apportion(total, class_weights);

  Rng rng(seed);
  std::vector<std::size_t> labeled_idx;
  std::vector<std::size_t> remainder;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    if (idx.empty()) continue;
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t take = std::clamp<std::size_t>(quota[c], 1, idx.size());
    labeled_idx.insert(labeled_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    remainder.insert(remainder.end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
  }
  std::sort(remainder.begin(), remainder.end());
  std::shuffle(remainder.begin(), remainder.end(), rng);
  const auto keep = static_cast<std::size_t>(
      std::llround(spec.unlabeled_fraction * static_cast<double>(remainder.size())));
  remainder.resize(keep);
  std::sort(labeled_idx.begin(), labeled_idx.end());
  std::sort(remainder.begin(), remainder.end());
  return {dataset.subset(labeled_idx), dataset.subset(remainder)};
}

/// Stratified holdout used to carve a test set off a generated task.
inline LabeledSplit train_test_split(const Dataset& dataset, double test_fraction,
                                     std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ParameterError("train_test_split: fraction must lie in (0, 1)");
  }
  auto parts = split_labeled(dataset, {test_fraction, 1.0}, seed);
  return {std::move(parts.unlabeled), std::move(parts.labeled)};  // {train, test}
}

/// Labeled and unlabeled pools each split across clients with independently
/// drawn quantity-skew weights.
inline std::vector<ClientDataset> partition_quantity_skew(const Dataset& labeled,
                                                          const Matrix& unlabeled,
                                                          const PartitionSpec& spec) {
  spec.validate();
  const std::size_t k = spec.num_clients;
  const std::size_t dim = labeled.size() > 0 ? labeled.dim() : unlabeled.cols();

  Rng lrng(derive_seed(spec.seed, "labeled"));
  auto lw = detail::quantity_weights(k, spec.sigma, lrng);
  auto lslices = detail::random_slices(labeled.size(), detail::allocate_shares(labeled.size(), lw), lrng);

  Rng urng(derive_seed(spec.seed, "unlabeled"));
  auto uw = detail::quantity_weights(k, spec.sigma, urng);
  auto uslices =
      detail::random_slices(unlabeled.rows(), detail::allocate_shares(unlabeled.rows(), uw), urng);

  std::vector<ClientDataset> clients;
  clients.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    ClientDataset client;
    client.client_id = static_cast<int>(c);
    client.labeled = labeled.subset(lslices[c]);
    client.labeled.num_classes = labeled.num_classes;
    if (client.labeled.features.cols() == 0) client.labeled.features = Matrix(0, dim);
    client.unlabeled_features = uslices[c].empty() ? Matrix(0, dim) : unlabeled.select_rows(uslices[c]);
    clients.push_back(std::move(client));
  }
  return clients;
}

inline std::vector<ClientDataset> partition_quantity_skew(const Dataset& labeled,
                                                          const Dataset& unlabeled,
                                                          const PartitionSpec& spec) {
  return partition_quantity_skew(labeled, unlabeled.features, spec);
}

/// Number of distinct classes a client may hold, drawn from
/// U[mu(1-sigma_c), mu(1+sigma_c)], rounded and clamped to [1, C].
inline std::vector<std::vector<int>> draw_class_assignment(std::size_t num_clients,
                                                           std::size_t num_classes, std::size_t mu,
                                                           double sigma_c, Rng& rng) {
  const double lo = static_cast<double>(mu) * (1.0 - sigma_c);
  const double hi = static_cast<double>(mu) * (1.0 + sigma_c);
  std::uniform_real_distribution<double> count_dist(lo, hi);
  std::vector<std::vector<int>> out(num_clients);
  std::vector<int> classes(num_classes);
  for (auto& assigned : out) {
    const double raw = sigma_c == 0.0 ? lo : count_dist(rng);
    const auto count = std::clamp<long long>(std::llround(raw), 1, static_cast<long long>(num_classes));
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng);
    assigned.assign(classes.begin(), classes.begin() + count);
    std::sort(assigned.begin(), assigned.end());
  }
  return out;
}

/// Label-skewed labeled partition: each client only receives samples from its
/// own class subset. Class subsets are redrawn until every class present in
/// `labeled` has at least one holder, so no sample is dropped. Within a class
/// the samples are split over its holders by quantity-skew weights.
/// Returned clients carry an empty unlabeled matrix.
inline std::vector<ClientDataset> partition_class_availability(const Dataset& labeled,
                                                               const PartitionSpec& spec) {
  spec.validate();
  if (!spec.class_mu) throw ParameterError("partition: class availability requires class_mu");
  const std::size_t mu = *spec.class_mu;
  const std::size_t num_classes = labeled.num_classes;
  if (mu > num_classes) throw ParameterError("partition: class_mu exceeds C");
  const std::size_t k = spec.num_clients;
  const auto by_class = detail::indices_by_class(labeled);

  const auto max_count = std::min<std::size_t>(
      num_classes, static_cast<std::size_t>(std::llround(static_cast<double>(mu) * (1.0 + spec.class_sigma_c))));
  std::size_t present = 0;
  for (const auto& idx : by_class) present += !idx.empty();
  if (k * max_count < present) {
    throw ParameterError("partition: " + std::to_string(k) + " clients cannot cover " +
                         std::to_string(present) + " classes");
  }

  constexpr int kMaxAttempts = 1000;
  std::vector<std::vector<int>> assignment;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxAttempts) {
      throw ParameterError("partition: no class assignment covering every class found");
    }
    Rng rng(derive_seed(spec.seed, "classes", static_cast<std::uint64_t>(attempt)));
    assignment = draw_class_assignment(k, num_classes, mu, spec.class_sigma_c, rng);
    std::vector<bool> covered(num_classes, false);
    for (const auto& a : assignment) {
      for (int c : a) covered[static_cast<std::size_t>(c)] = true;
    }
    bool ok = true;
    for (std::size_t c = 0; c < num_classes; ++c) ok = ok && (covered[c] || by_class[c].empty());
    if (ok) break;
  }

  Rng rng(derive_seed(spec.seed, "labeled"));
  const auto weights = detail::quantity_weights(k, spec.sigma, rng);
  std::vector<std::vector<std::size_t>> client_idx(k);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (by_class[c].empty()) continue;
    std::vector<std::size_t> holders;
    std::vector<double> hw;
    for (std::size_t i = 0; i < k; ++i) {
      if (std::binary_search(assignment[i].begin(), assignment[i].end(), static_cast<int>(c))) {
        holders.push_back(i);
        hw.push_back(weights[i]);
      }
    }
    auto sizes = detail::allocate_shares(by_class[c].size(), hw, /*min_one=*/true);
    auto slices = detail::random_slices(by_class[c].size(), sizes, rng);
    for (std::size_t h = 0; h < holders.size(); ++h) {
      for (auto s : slices[h]) client_idx[holders[h]].push_back(by_class[c][s]);
    }
  }

  std::vector<ClientDataset> clients;
  for (std::size_t i = 0; i < k; ++i) {
    std::sort(client_idx[i].begin(), client_idx[i].end());
    ClientDataset client;
    client.client_id = static_cast<int>(i);
    client.labeled = labeled.subset(client_idx[i]);
    if (client.labeled.features.cols() == 0) client.labeled.features = Matrix(0, labeled.dim());
    client.unlabeled_features = Matrix(0, labeled.dim());
    clients.push_back(std::move(client));
  }
  return clients;
}

/// Attaches the unlabeled parts of `unlabeled_parts` to `labeled_parts` by
/// position (both lists must be indexed by client id).
inline std::vector<ClientDataset> merge_partitions(std::vector<ClientDataset> labeled_parts,
                                                   const std::vector<ClientDataset>& unlabeled_parts) {
  if (labeled_parts.size() != unlabeled_parts.size()) {
    throw ShapeError("merge_partitions: client count mismatch");
  }
  for (std::size_t i = 0; i < labeled_parts.size(); ++i) {
    labeled_parts[i].unlabeled_features = unlabeled_parts[i].unlabeled_features;
  }
  return labeled_parts;
}

/// FNV-1a over the raw bytes of features and labels.
inline std::uint64_t dataset_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t header[3] = {d.size(), d.dim(), d.num_classes};
  mix(header, sizeof(header));
  mix(d.features.values().data(), d.features.values().size() * sizeof(double));
  mix(d.labels.data(), d.labels.size() * sizeof(int));
  return h;
}

/// Text format: a header line `n d C`, then one sample per line with d
/// features followed by the label (-1 marks an unlabeled row).
inline void write_dataset(std::ostream& os, const Dataset& labeled, const Matrix& unlabeled = {}) {
  const std::size_t dim = labeled.size() > 0 ? labeled.dim() : unlabeled.cols();
  os << labeled.size() + unlabeled.rows() << ' ' << dim << ' ' << labeled.num_classes << '\n';
  os.precision(17);
  auto emit = [&os](std::span<const double> x, int label) {
    for (double v : x) os << v << ' ';
    os << label << '\n';
  };
  for (std::size_t i = 0; i < labeled.size(); ++i) emit(labeled.features.row(i), labeled.labels[i]);
  for (std::size_t i = 0; i < unlabeled.rows(); ++i) emit(unlabeled.row(i), -1);
  if (!os) throw IoError("write_dataset: stream failure");
}

struct LoadedDataset {
  Dataset labeled;
  Matrix unlabeled;
};

inline LoadedDataset read_dataset(std::istream& is) {
  std::string line;
  std::size_t n = 0, dim = 0, num_classes = 0;
  if (!std::getline(is, line)) throw ParseError(1, "dataset: missing header");
  {
    std::istringstream hs(line);
    if (!(hs >> n >> dim >> num_classes)) throw ParseError(1, "dataset: header must be 'n d C'");
  }
  LoadedDataset out{Dataset{Matrix(0, dim), {}, num_classes}, Matrix(0, dim)};
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t line_no = i + 2;
    if (!std::getline(is, line)) throw ParseError(line_no, "dataset: expected " + std::to_string(n) + " samples");
    std::istringstream ls(line);
    for (auto& v : row) {
      if (!(ls >> v)) throw ParseError(line_no, "dataset: expected " + std::to_string(dim) + " features");
    }
    long long label = 0;
    if (!(ls >> label)) throw ParseError(line_no, "dataset: missing label");
    if (label == -1) {
      out.unlabeled.append_row(row);
    } else if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw ParseError(line_no, "dataset: label out of range");
    } else {
      out.labeled.features.append_row(row);
      out.labeled.labels.push_back(static_cast<int>(label));
    }
  }
  return out;
}

}  // namespace fedstar
