#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "testing.hpp"

namespace fedstar {
namespace {

// Multiset of feature rows, for conservation checks.
std::multiset<std::vector<double>> rows_of(const Matrix& m) {
  std::multiset<std::vector<double>> out;
  for (std::size_t i = 0; i < m.rows(); ++i) out.emplace(m.row(i).begin(), m.row(i).end());
  return out;
}

Dataset unbalanced_dataset(std::uint64_t seed) {
  // Class c gets 20 + 13c samples, so ratios are not uniform.
  Dataset d{Matrix(0, 3), {}, 5};
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int c = 0; c < 5; ++c) {
    for (int i = 0; i < 20 + 13 * c; ++i) {
      const double row[] = {noise(rng) + c, noise(rng), noise(rng)};
      d.features.append_row(row);
      d.labels.push_back(c);
    }
  }
  return d;
}

TEST(MakeBlobs, BalancedClassesAndDeterministic) {
  Dataset d = make_blobs(100, 10, 4, 0.5, 3);
  for (auto count : d.class_counts()) EXPECT_EQ(count, 10u);
  EXPECT_EQ(d, make_blobs(100, 10, 4, 0.5, 3));
  EXPECT_NE(dataset_hash(d), dataset_hash(make_blobs(100, 10, 4, 0.5, 4)));

  Dataset odd = make_blobs(103, 10, 4, 0.5, 3);
  auto counts = odd.class_counts();
  EXPECT_LE(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()), 1u);
}

TEST(MakeBlobs, RejectsTooFewSamples) { EXPECT_THROW(make_blobs(5, 10, 4, 0.5, 1), ParameterError); }

TEST(MakeBlobs, TinySpreadIsPerfectlyCentroidSeparable) {
  Dataset d = make_blobs(500, 10, 8, 1e-9, 17);
  // Fit the centroids from the data, then classify every sample.
  std::vector<std::vector<double>> centroid(10, std::vector<double>(8, 0.0));
  auto counts = d.class_counts();
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < 8; ++j) centroid[static_cast<std::size_t>(d.labels[i])][j] += d.features(i, j);
  }
  for (std::size_t c = 0; c < 10; ++c) {
    for (auto& v : centroid[c]) v /= static_cast<double>(counts[c]);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < 10; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < 8; ++j) dist += std::pow(d.features(i, j) - centroid[c][j], 2);
      if (dist < best_d) best_d = dist, best = c;
    }
    correct += static_cast<int>(best) == d.labels[i];
  }
  EXPECT_EQ(correct, d.size());
}

TEST(SplitLabeled, FullFractionTakesEverything) {
  Dataset d = make_blobs(200, 4, 3, 0.5, 1);
  auto split = split_labeled(d, {1.0, 1.0}, 2);
  EXPECT_EQ(split.labeled.size(), 200u);
  EXPECT_TRUE(split.unlabeled.empty());
}

TEST(SplitLabeled, ThreePercentOfBalancedThousand) {
  Dataset d = make_blobs(1000, 10, 3, 0.5, 5);
  auto split = split_labeled(d, {0.03, 1.0}, 6);
  EXPECT_EQ(split.labeled.size(), 30u);
  for (auto count : split.labeled.class_counts()) EXPECT_EQ(count, 3u);
  EXPECT_EQ(split.unlabeled.size(), 970u);
}

TEST(SplitLabeled, PreservesClassRatiosOver100Seeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Dataset d = unbalanced_dataset(seed);
    const double L = 0.05 + 0.009 * static_cast<double>(seed);
    auto split = split_labeled(d, {L, 1.0}, seed);
    const auto total = d.class_counts();
    const auto labeled = split.labeled.class_counts();
    const auto n_l = static_cast<double>(split.labeled.size());
    EXPECT_EQ(split.labeled.size(), static_cast<std::size_t>(std::llround(L * static_cast<double>(d.size()))));
    for (std::size_t c = 0; c < total.size(); ++c) {
      // Share within one sample of the population share.
      EXPECT_LE(std::abs(labeled[c] / n_l - static_cast<double>(total[c]) / static_cast<double>(d.size())),
                1.0 / n_l + 1e-12);
      // Per-class count within one sample of L * N_c, after allowing for the
      // rounding of the overall labeled total.
      const double total_rounding = std::abs(n_l - L * static_cast<double>(d.size()));
      EXPECT_LE(std::abs(static_cast<double>(labeled[c]) - L * static_cast<double>(total[c])),
                1.0 + total_rounding * static_cast<double>(total[c]) / static_cast<double>(d.size()) + 1e-9);
      EXPECT_GE(labeled[c], 1u);
    }
  }
}

TEST(SplitLabeled, DisjointAndKeepsUFraction) {
  Dataset d = make_blobs(400, 4, 3, 0.5, 8);
  auto split = split_labeled(d, {0.1, 0.5}, 9);
  EXPECT_EQ(split.labeled.size(), 40u);
  EXPECT_EQ(split.unlabeled.size(), 180u);
  auto l = rows_of(split.labeled.features);
  for (const auto& r : rows_of(split.unlabeled.features)) EXPECT_EQ(l.count(r), 0u);
}

TEST(SplitLabeled, RejectsTooFewLabels) {
  Dataset d = make_blobs(100, 10, 3, 0.5, 1);
  EXPECT_THROW(split_labeled(d, {0.05, 1.0}, 1), ParameterError);
}

TEST(QuantitySkew, ZeroSigmaGivesEqualShares) {
  Dataset d = make_blobs(100, 4, 3, 0.5, 1);
  PartitionSpec spec{4, 0.0, std::nullopt, 0.0, 3};
  auto clients = partition_quantity_skew(d, Matrix(0, 3), spec);
  for (const auto& c : clients) {
    EXPECT_EQ(c.num_labeled(), 25u);
    EXPECT_EQ(c.num_unlabeled(), 0u);
  }
}

TEST(QuantitySkew, SingleClientHoldsEverything) {
  Dataset d = make_blobs(60, 3, 3, 0.5, 1);
  Matrix u = testing::random_matrix(40, 3, 2);
  auto clients = partition_quantity_skew(d, u, {1, 0.4, std::nullopt, 0.0, 5});
  ASSERT_EQ(clients.size(), 1u);
  EXPECT_EQ(clients[0].num_labeled(), 60u);
  EXPECT_EQ(clients[0].num_unlabeled(), 40u);
}

TEST(QuantitySkew, ConservesEverySampleOver100Seeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Dataset labeled = make_blobs(150 + seed, 5, 3, 0.5, seed);
    Matrix unlabeled = testing::random_matrix(300 + 2 * seed, 3, seed + 1000);
    PartitionSpec spec{1 + seed % 12, 0.05 * static_cast<double>(seed % 11), std::nullopt, 0.0, seed};
    auto clients = partition_quantity_skew(labeled, unlabeled, spec);
    ASSERT_EQ(clients.size(), spec.num_clients);

    std::multiset<std::vector<double>> got_l, got_u;
    std::map<std::vector<double>, int> label_of;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      label_of[{labeled.features.row(i).begin(), labeled.features.row(i).end()}] = labeled.labels[i];
    }
    for (std::size_t k = 0; k < clients.size(); ++k) {
      EXPECT_EQ(clients[k].client_id, static_cast<int>(k));
      for (std::size_t i = 0; i < clients[k].num_labeled(); ++i) {
        std::vector<double> row(clients[k].labeled.features.row(i).begin(), clients[k].labeled.features.row(i).end());
        EXPECT_EQ(label_of.at(row), clients[k].labeled.labels[i]);
        got_l.insert(std::move(row));
      }
      auto u = rows_of(clients[k].unlabeled_features);
      got_u.insert(u.begin(), u.end());
    }
    EXPECT_EQ(got_l, rows_of(labeled.features));
    EXPECT_EQ(got_u, rows_of(unlabeled));
  }
}

TEST(QuantitySkew, DeterministicPerSeed) {
  Dataset d = make_blobs(200, 4, 3, 0.5, 1);
  Matrix u = testing::random_matrix(300, 3, 2);
  PartitionSpec spec{7, 0.25, std::nullopt, 0.0, 11};
  EXPECT_EQ(partition_quantity_skew(d, u, spec), partition_quantity_skew(d, u, spec));
}

TEST(QuantitySkew, SizeVarianceGrowsWithSigma) {
  const std::size_t n = 5000, k = 10;
  double previous = -1.0;
  for (double sigma : {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}) {
    double total_var = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      auto w = detail::quantity_weights(k, sigma, rng);
      auto sizes = detail::allocate_shares(n, w);
      double mean = static_cast<double>(n) / static_cast<double>(k), var = 0.0;
      for (auto s : sizes) var += std::pow(static_cast<double>(s) - mean, 2);
      total_var += var / static_cast<double>(k);
    }
    EXPECT_GE(total_var, previous) << "sigma " << sigma;
    previous = total_var;
  }
}

TEST(AllocateShares, ResidueGoesToLowestIdsFirst) {
  auto sizes = detail::allocate_shares(10, {1.0, 1.0, 1.0});
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 3, 3}));
}

TEST(ClassAvailability, FullMuSeesEveryClass) {
  Dataset d = make_blobs(500, 5, 3, 0.5, 1);
  PartitionSpec spec{6, 0.25, 5, 0.0, 2};
  for (const auto& c : partition_class_availability(d, spec)) {
    for (auto count : c.labeled.class_counts()) EXPECT_GT(count, 0u);
  }
}

TEST(ClassAvailability, MuThreeGivesExactlyThreeClasses) {
  Dataset d = make_blobs(2400, 12, 3, 0.5, 1);
  PartitionSpec spec{10, 0.25, 3, 0.0, 3};
  std::size_t total = 0;
  for (const auto& c : partition_class_availability(d, spec)) {
    auto counts = c.labeled.class_counts();
    EXPECT_EQ(std::count_if(counts.begin(), counts.end(), [](auto n) { return n > 0; }), 3);
    EXPECT_EQ(c.num_unlabeled(), 0u);
    total += c.num_labeled();
  }
  EXPECT_EQ(total, d.size());
}

TEST(ClassAvailability, CountsStayInRangeOver1000Draws) {
  const std::size_t mu = 4;
  const double sigma_c = 0.5;
  const auto lo = std::llround(static_cast<double>(mu) * (1.0 - sigma_c));
  const auto hi = std::llround(static_cast<double>(mu) * (1.0 + sigma_c));
  std::set<long long> seen;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    for (const auto& classes : draw_class_assignment(5, 10, mu, sigma_c, rng)) {
      const auto n = static_cast<long long>(classes.size());
      EXPECT_GE(n, lo);
      EXPECT_LE(n, hi);
      seen.insert(n);
      EXPECT_EQ(std::set<int>(classes.begin(), classes.end()).size(), classes.size());
    }
  }
  EXPECT_EQ(*seen.begin(), lo);
  EXPECT_EQ(*seen.rbegin(), hi);
}

TEST(ClassAvailability, RejectsMuAboveClassCount) {
  Dataset d = make_blobs(100, 4, 3, 0.5, 1);
  EXPECT_THROW(partition_class_availability(d, {3, 0.0, 5, 0.0, 1}), ParameterError);
}

TEST(ClassAvailability, UnlabeledPartitionedWithoutClassRestriction) {
  Dataset labeled = make_blobs(300, 10, 3, 0.5, 1);
  Matrix unlabeled = testing::random_matrix(700, 3, 2);
  PartitionSpec spec{10, 0.25, 3, 0.25, 4};
  auto parts = merge_partitions(partition_class_availability(labeled, spec),
                                partition_quantity_skew(Dataset{Matrix(0, 3), {}, 10}, unlabeled, spec));
  std::multiset<std::vector<double>> u;
  for (const auto& c : parts) {
    auto r = rows_of(c.unlabeled_features);
    u.insert(r.begin(), r.end());
  }
  EXPECT_EQ(u, rows_of(unlabeled));
}

TEST(DatasetIo, RoundTripsWithUnlabeledRows) {
  Dataset d = make_blobs(30, 3, 4, 0.5, 1);
  Matrix u = testing::random_matrix(5, 4, 2);
  std::stringstream ss;
  write_dataset(ss, d, u);
  auto loaded = read_dataset(ss);
  EXPECT_EQ(loaded.labeled, d);
  EXPECT_EQ(loaded.unlabeled, u);
}

TEST(DatasetIo, ReportsLineOfMalformedRow) {
  std::stringstream ss("2 2 2\n0.1 0.2 1\n0.3 oops 0\n");
  try {
    read_dataset(ss);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

}  // namespace
}  // namespace fedstar
