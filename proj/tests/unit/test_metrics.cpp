#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "sgdsc/metrics.hpp"

using namespace sgdsc;

namespace {

// Textbook formulas over a plain count matrix, in double.
struct Reference {
  double oa, aa, kappa;
};

Reference reference(const std::vector<std::vector<std::uint64_t>>& m) {
  const std::size_t C = m.size();
  double n = 0, diag = 0, aa = 0;
  std::size_t present = 0;
  std::vector<double> row(C, 0), col(C, 0);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      n += static_cast<double>(m[i][j]);
      row[i] += static_cast<double>(m[i][j]);
      col[j] += static_cast<double>(m[i][j]);
      if (i == j) diag += static_cast<double>(m[i][j]);
    }
  for (std::size_t i = 0; i < C; ++i) {
    if (row[i] == 0) continue;
    aa += static_cast<double>(m[i][i]) / row[i];
    ++present;
  }
  double pe = 0;
  for (std::size_t i = 0; i < C; ++i) pe += row[i] * col[i] / (n * n);
  const double po = diag / n;
  return {po, aa / static_cast<double>(present), (po - pe) / (1 - pe)};
}

ConfusionMatrix random_matrix(std::size_t C, std::size_t samples, std::mt19937_64& rng, double agreement) {
  ConfusionMatrix cm(C);
  std::bernoulli_distribution agree(agreement);
  for (std::size_t s = 0; s < samples; ++s) {
    const int t = static_cast<int>(rng() % C) + 1;
    const int p = agree(rng) ? t : static_cast<int>(rng() % C) + 1;
    cm.accumulate(t, p);
  }
  return cm;
}

}  // namespace

TEST(ConfusionMatrix, AccumulateIncrementsOneCell) {
  ConfusionMatrix cm(3);
  cm.accumulate(1, 1);
  EXPECT_EQ(cm.at(1, 1), 1u);
  EXPECT_EQ(cm.total(), 1u);
  cm.accumulate(2, 3);
  EXPECT_EQ(cm.at(2, 3), 1u);
  EXPECT_EQ(cm.at(3, 2), 0u);
  EXPECT_THROW(cm.accumulate(0, 1), DataError);
  EXPECT_THROW(cm.accumulate(1, 4), DataError);
  EXPECT_THROW(ConfusionMatrix(0), ConfigError);
}

TEST(ConfusionMatrix, TotalAndOrderIndependence) {
  std::mt19937_64 rng(1);
  std::vector<std::pair<int, int>> pairs(997);
  for (auto& [t, p] : pairs) {
    t = static_cast<int>(rng() % 6) + 1;
    p = static_cast<int>(rng() % 6) + 1;
  }
  ConfusionMatrix a(6), b(6);
  for (const auto& [t, p] : pairs) a.accumulate(t, p);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  for (const auto& [t, p] : pairs) b.accumulate(t, p);
  EXPECT_EQ(a.total(), 997u);
  EXPECT_EQ(a, b);
}

TEST(Metrics, HandComputedTwoClass) {
  const auto cm = ConfusionMatrix::from_rows({{2, 1}, {0, 1}});
  EXPECT_NEAR(overall_accuracy(cm), 0.75, 1e-9);
  EXPECT_NEAR(average_accuracy(cm), (2.0 / 3.0 + 1.0) / 2.0, 1e-9);
  EXPECT_NEAR(kappa(cm), 0.5, 1e-9);
  const auto pc = per_class_accuracy(cm);
  ASSERT_EQ(pc.size(), 2u);
  EXPECT_NEAR(pc[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(pc[1], 1.0, 1e-12);
}

TEST(Metrics, HandComputedThreeClass) {
  const auto cm = ConfusionMatrix::from_rows({{5, 1, 0}, {2, 5, 1}, {0, 1, 5}});
  EXPECT_NEAR(overall_accuracy(cm), 15.0 / 20.0, 1e-9);
  EXPECT_NEAR(average_accuracy(cm), (5.0 / 6 + 5.0 / 8 + 5.0 / 6) / 3, 1e-9);
  // n = 20, rows 6/8/6, cols 7/7/6: pe = (42 + 56 + 36) / 400.
  EXPECT_NEAR(kappa(cm), (0.75 - 134.0 / 400) / (1 - 134.0 / 400), 1e-9);
}

TEST(Metrics, DiagonalIsPerfect) {
  const auto cm = ConfusionMatrix::from_rows({{3, 0, 0}, {0, 7, 0}, {0, 0, 1}});
  EXPECT_EQ(overall_accuracy(cm), 1.0);
  EXPECT_EQ(average_accuracy(cm), 1.0);
  EXPECT_NEAR(kappa(cm), 1.0, 1e-12);
}

TEST(Metrics, MatchesReferenceOnRandomMatrices) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng() % 9;
    const auto cm = random_matrix(C, 50 + rng() % 500, rng, 0.6);
    const auto ref = reference(cm.rows());
    EXPECT_NEAR(overall_accuracy(cm), ref.oa, 1e-9);
    EXPECT_NEAR(average_accuracy(cm), ref.aa, 1e-9);
    EXPECT_NEAR(kappa(cm), ref.kappa, 1e-9);
    EXPECT_LE(kappa(cm), overall_accuracy(cm) + 1e-12);
    EXPECT_LE(overall_accuracy(cm), 1.0);
  }
}

TEST(Metrics, InvariantUnderClassPermutation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 3 + rng() % 6;
    const auto cm = random_matrix(C, 400, rng, 0.5);
    std::vector<std::size_t> perm(C);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto rows = cm.rows();
    std::vector<std::vector<std::uint64_t>> permuted(C, std::vector<std::uint64_t>(C));
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) permuted[perm[i]][perm[j]] = rows[i][j];
    const auto pm = ConfusionMatrix::from_rows(permuted);
    EXPECT_NEAR(overall_accuracy(pm), overall_accuracy(cm), 1e-9);
    EXPECT_NEAR(average_accuracy(pm), average_accuracy(cm), 1e-9);
    EXPECT_NEAR(kappa(pm), kappa(cm), 1e-9);
  }
}

TEST(Metrics, MergeEqualsPooledSamples) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<int, int>> pairs(300);
    for (auto& [t, p] : pairs) {
      t = static_cast<int>(rng() % 4) + 1;
      p = rng() % 3 == 0 ? static_cast<int>(rng() % 4) + 1 : t;
    }
    ConfusionMatrix a(4), b(4), pooled(4);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      (i < 120 ? a : b).accumulate(pairs[i].first, pairs[i].second);
      pooled.accumulate(pairs[i].first, pairs[i].second);
    }
    a.merge(b);
    EXPECT_EQ(a, pooled);
    EXPECT_NEAR(kappa(a), kappa(pooled), 1e-12);
  }
  ConfusionMatrix x(2);
  EXPECT_THROW(x.merge(ConfusionMatrix(3)), ConfigError);
}

TEST(Metrics, IndependentPredictionsGiveKappaNearZero) {
  std::mt19937_64 rng(5);
  const auto cm = random_matrix(8, 200000, rng, 0.0);
  EXPECT_NEAR(kappa(cm), 0.0, 0.01);
  EXPECT_NEAR(overall_accuracy(cm), 1.0 / 8, 0.01);
}

TEST(Metrics, DegenerateCases) {
  EXPECT_THROW(overall_accuracy(ConfusionMatrix(3)), DataError);
  EXPECT_THROW(kappa(ConfusionMatrix(3)), DataError);
  // All mass in one cell: pe = 1, limit convention.
  EXPECT_EQ(kappa(ConfusionMatrix::from_rows({{5, 0}, {0, 0}})), 1.0);
  // Class 3 has no true samples: excluded from AA, reported as -1.
  const auto cm = ConfusionMatrix::from_rows({{4, 0, 0}, {1, 1, 0}, {0, 0, 0}});
  EXPECT_NEAR(average_accuracy(cm), (1.0 + 0.5) / 2, 1e-12);
  EXPECT_EQ(per_class_accuracy(cm)[2], -1.0);
}

TEST(Metrics, ReportJson) {
  const auto cm = ConfusionMatrix::from_rows({{2, 1, 0}, {0, 1, 0}, {0, 0, 0}});
  const auto j = to_json(make_report(cm));
  EXPECT_NEAR(j.at("oa").get<double>(), 0.75, 1e-12);
  ASSERT_EQ(j.at("per_class").size(), 3u);
  EXPECT_TRUE(j.at("per_class")[2].is_null());
  EXPECT_EQ(j.at("confusion")[0][1].get<int>(), 1);
  for (const char* key : {"oa", "aa", "kappa", "per_class", "confusion"}) EXPECT_TRUE(j.contains(key)) << key;
}
