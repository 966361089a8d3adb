#include <gtest/gtest.h>

#include <cmath>

#include "countocc/core/rng.hpp"
#include "countocc/metrics.hpp"

using namespace countocc;

TEST(Mae, Examples) {
  EXPECT_DOUBLE_EQ(mae({1, 2, 3}, {1, 2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(mae({1, 4}, {2, 2}), 1.5);
  EXPECT_DOUBLE_EQ(mae({10}, {7}), 3.0);
  EXPECT_THROW(mae({}, {}), std::invalid_argument);
  EXPECT_THROW(mae({1}, {1, 2}), std::invalid_argument);
}

TEST(Rmse, Examples) {
  EXPECT_DOUBLE_EQ(rmse({1, 2}, {1, 2}), 0.0);
  EXPECT_NEAR(rmse({1, 4}, {2, 2}), std::sqrt(2.5), 1e-15);
  // constant error: rmse == mae == |e|
  EXPECT_DOUBLE_EQ(rmse({3, 5, 9}, {1, 3, 7}), 2.0);
  EXPECT_DOUBLE_EQ(mae({3, 5, 9}, {1, 3, 7}), 2.0);
}

TEST(Metrics, RmseDominatesMae) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(20);
    std::vector<double> p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(0, 50);
      g[i] = rng.uniform(0, 50);
    }
    ASSERT_GE(rmse(p, g) + 1e-12, mae(p, g));
  }
}

TEST(Metrics, PermutationInvariant) {
  Rng rng(6);
  std::vector<double> p, g;
  for (int i = 0; i < 31; ++i) {
    p.push_back(rng.uniform(0, 20));
    g.push_back(rng.uniform(0, 20));
  }
  auto p2 = p;
  auto g2 = g;
  // one fixed permutation applied to both
  std::vector<std::size_t> perm(p.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (7 * i + 3) % perm.size();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    p2[i] = p[perm[i]];
    g2[i] = g[perm[i]];
  }
  EXPECT_DOUBLE_EQ(mae(p, g), mae(p2, g2));
  EXPECT_DOUBLE_EQ(rmse(p, g), rmse(p2, g2));
}

TEST(Report, OracleInjectionAndRecomputation) {
  Rng rng(7);
  std::vector<PerImageRecord> records;
  for (int i = 0; i < 40; ++i) {
    PerImageRecord r;
    r.id = 40 - i;  // unsorted on purpose
    r.y = static_cast<double>(rng.uniform_int(3, 12));
    r.y_hat = r.y;  // perfect predictor
    r.y_vis = r.y - 1;
    r.y_hat_vis = r.y_vis;
    r.y_occ = 1;
    r.y_hat_occ = 1;
    records.push_back(r);
  }
  MetricsReport perfect = build_report(records);
  EXPECT_DOUBLE_EQ(perfect.mae, 0.0);
  EXPECT_DOUBLE_EQ(perfect.rmse, 0.0);
  EXPECT_TRUE(std::is_sorted(perfect.records.begin(), perfect.records.end(),
                             [](auto& a, auto& b) { return a.id < b.id; }));

  // all-zero predictor: mae equals the mean ground-truth count
  for (auto& r : records) r.y_hat = 0.0;
  MetricsReport zero = build_report(records);
  double mean_y = 0;
  for (const auto& r : records) mean_y += r.y;
  mean_y /= static_cast<double>(records.size());
  EXPECT_NEAR(zero.mae, mean_y, 1e-12);

  // report totals equal brute-force recomputation from the emitted records
  std::vector<double> p, g;
  for (const auto& r : zero.records) {
    p.push_back(r.y_hat);
    g.push_back(r.y);
  }
  EXPECT_DOUBLE_EQ(zero.mae, mae(p, g));
  EXPECT_DOUBLE_EQ(zero.rmse, rmse(p, g));
}

TEST(Report, JsonSerializationIsStable) {
  std::vector<PerImageRecord> records{{1, 5, 4.5, 4, 3.5, 1, 1.0}};
  MetricsReport r = build_report(records);
  const auto j1 = report_to_json(r).dump();
  const auto j2 = report_to_json(r).dump();
  EXPECT_EQ(j1, j2);
  EXPECT_NE(j1.find("\"mae\""), std::string::npos);
}
