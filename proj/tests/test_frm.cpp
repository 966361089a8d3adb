#include <gtest/gtest.h>

#include "countocc/frm.hpp"
#include "countocc/losses.hpp"
#include "frm_oracle.hpp"
#include "test_util.hpp"

using namespace countocc;
using countocc::testing::finite_difference;
using countocc::testing::gradient_error;
using countocc::testing::max_abs_diff;
using countocc::testing::random_tensor;

namespace {

Tensor<double> identity(std::size_t n) {
  Tensor<double> t({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

LevelMask random_level_mask(Rng& rng, std::size_t h, std::size_t w, double p) {
  LevelMask m;
  m.grid = Tensor<std::uint8_t>({h, w});
  for (std::size_t i = 0; i < m.grid.size(); ++i)
    m.grid[i] = static_cast<std::uint8_t>(rng.uniform() < p);
  return m;
}

}  // namespace

TEST(PosTable, ShapeAndRange) {
  auto pe = sinusoidal_pos_table<double>(4, 4, 8);
  EXPECT_EQ(pe.rows(), 16u);
  EXPECT_EQ(pe.cols(), 8u);
  for (std::size_t i = 0; i < pe.size(); ++i) {
    EXPECT_GE(pe[i], -1.0);
    EXPECT_LE(pe[i], 1.0);
  }
  // distinct positions get distinct encodings
  bool all_same = true;
  for (std::size_t j = 0; j < 8; ++j) all_same = all_same && pe(0, j) == pe(5, j);
  EXPECT_FALSE(all_same);
  EXPECT_THROW(sinusoidal_pos_table<double>(2, 2, 6), std::invalid_argument);
}

TEST(InitQueries, RowsAreMuPlusPositionEncoding) {
  Rng rng(1);
  auto p = make_frm_level<double>(rng, 8, 4, 4, 4, 2);
  ad::Tape<double> tp;
  auto vars = lift_frm_level(tp, p, false);
  const std::vector<std::size_t> occ{3, 7, 9};
  ad::Var q0 = init_queries(tp, vars, occ);
  const auto& v = tp.value(q0);
  ASSERT_EQ(v.rows(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_DOUBLE_EQ(v(i, j), p.mu_mask(0, j) + p.pos_table(occ[i], j));

  // zero positional table -> all rows identical to mu_mask
  p.pos_table.fill(0.0);
  ad::Tape<double> tp2;
  auto vars2 = lift_frm_level(tp2, p, false);
  const auto& v2 = tp2.value(init_queries(tp2, vars2, occ));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(v2(i, j), p.mu_mask(0, j));
}

TEST(Attend, SingleKeyIdentityProjections) {
  // one query, one key, identity projections: softmax over one key is 1, so
  // output = value + query
  ad::Tape<double> tp;
  Tensor<double> I = identity(2);
  ad::Var wq = tp.constant(I), wk = tp.constant(I), wv = tp.constant(I), wo = tp.constant(I);
  ad::Var q = tp.constant(Tensor<double>::from_rows(1, 2, {0.3, -0.7}));
  ad::Var kv = tp.constant(Tensor<double>::from_rows(1, 2, {2.0, 5.0}));
  ad::Var out = attend(tp, q, kv, kv, wq, wk, wv, wo, 1);
  EXPECT_NEAR(tp.value(out)(0, 0), 2.0 + 0.3, 1e-12);
  EXPECT_NEAR(tp.value(out)(0, 1), 5.0 - 0.7, 1e-12);
}

TEST(Attend, EqualScoresAverageValues) {
  // two identical keys but different values: equal scores -> mean of values,
  // plus the residual query
  ad::Tape<double> tp;
  Tensor<double> I = identity(2);
  ad::Var wq = tp.constant(I), wk = tp.constant(I), wv = tp.constant(I), wo = tp.constant(I);
  ad::Var q = tp.constant(Tensor<double>::from_rows(1, 2, {1.0, 0.0}));
  ad::Var keys = tp.constant(Tensor<double>::from_rows(2, 2, {0.5, 0.5, 0.5, 0.5}));
  ad::Var values = tp.constant(Tensor<double>::from_rows(2, 2, {2.0, 0.0, 4.0, 6.0}));
  ad::Var out = attend(tp, q, keys, values, wq, wk, wv, wo, 1);
  EXPECT_NEAR(tp.value(out)(0, 0), 3.0 + 1.0, 1e-12);
  EXPECT_NEAR(tp.value(out)(0, 1), 3.0 + 0.0, 1e-12);
}

TEST(Attend, MatchesBruteForceOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Rng r = rng.derive("t", trial);
    AttentionParams<double> w{random_tensor(r, 4, 4), random_tensor(r, 4, 4),
                              random_tensor(r, 4, 4), random_tensor(r, 4, 4)};
    Tensor<double> q = random_tensor(r, 2, 4);
    Tensor<double> kv = random_tensor(r, 3, 4);

    ad::Tape<double> tp;
    ad::Var out = attend(tp, tp.constant(q), tp.constant(kv), tp.constant(kv), tp.constant(w.wq),
                         tp.constant(w.wk), tp.constant(w.wv), tp.constant(w.wo), 2);

    Tensor<double> expected = countocc::testing::oracle_mha(q, kv, kv, w, 2);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += q[i];
    EXPECT_LT(max_abs_diff(tp.value(out), expected), 1e-10);
  }
}

TEST(ReconstructLevel, MatchesStraightLineOracle) {
  // tiny instances: C=8, 4x4 grid, ~5 occluded cells, float64, 1e-10
  for (int trial = 0; trial < 8; ++trial) {
    Rng rng(900 + trial);
    auto params = make_frm_level<double>(rng.derive("p"), 8, 4, 4, 4, 2);
    Rng data = rng.derive("data");
    Tensor<double> tokens = random_tensor(data, 16, 8);
    Tensor<double> z_vt = random_tensor(data, 1, 4);
    LevelMask mask = random_level_mask(data, 4, 4, 0.3);
    if (mask.occluded_count() == 0) mask.grid[5] = 1;

    Tensor<double> mine = reconstruct_level(tokens, mask, z_vt, params);

    std::vector<std::uint8_t> cells(mask.grid.storage().begin(), mask.grid.storage().end());
    Tensor<double> expected =
        countocc::testing::oracle_reconstruct_level(tokens, cells, z_vt, params);
    ASSERT_EQ(mine.rows(), expected.rows());
    EXPECT_LT(max_abs_diff(mine, expected), 1e-10);
  }
}

TEST(ReconstructLevel, ResidualIdentityUnderZeroProjections) {
  // zero attention output projections + zero MLP -> pure residual path, so
  // the reconstruction equals the initialized queries
  Rng rng(21);
  auto p = make_frm_level<double>(rng, 8, 4, 4, 4, 2);
  p.self_attn.wo.fill(0.0);
  p.cross_vis.wo.fill(0.0);
  p.cross_sem.wo.fill(0.0);
  p.mlp_w2.fill(0.0);
  p.mlp_b2.fill(0.0);

  Tensor<double> tokens = random_tensor(rng, 16, 8);
  Tensor<double> z_vt = random_tensor(rng, 1, 4);
  LevelMask mask = random_level_mask(rng, 4, 4, 0.4);
  if (mask.occluded_count() == 0) mask.grid[0] = 1;

  Tensor<double> rec = reconstruct_level(tokens, mask, z_vt, p);
  std::size_t row = 0;
  for (std::size_t i = 0; i < mask.grid.size(); ++i) {
    if (!mask.grid[i]) continue;
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(rec(row, j), p.mu_mask(0, j) + p.pos_table(i, j), 1e-12);
    ++row;
  }
}

TEST(ReconstructLevel, EmptyCasesAndErrors) {
  Rng rng(22);
  auto p = make_frm_level<double>(rng, 8, 4, 4, 4, 2);
  Tensor<double> tokens = random_tensor(rng, 16, 8);
  Tensor<double> z_vt = random_tensor(rng, 1, 4);

  // N_o = 0 -> empty output, reconstruction skipped
  LevelMask zero;
  zero.grid = Tensor<std::uint8_t>({4, 4}, 0);
  EXPECT_EQ(reconstruct_level(tokens, zero, z_vt, p).rows(), 0u);

  // empty semantic guidance -> error
  LevelMask some = random_level_mask(rng, 4, 4, 0.5);
  some.grid[3] = 1;
  Tensor<double> empty_vt({0, 4});
  EXPECT_THROW(reconstruct_level(tokens, some, empty_vt, p), std::invalid_argument);
}

TEST(ReconstructLevel, FullOcclusionSkipsVisibleCrossAttention) {
  Rng rng(23);
  auto p = make_frm_level<double>(rng, 8, 2, 2, 4, 2);
  Tensor<double> tokens = random_tensor(rng, 4, 8);
  Tensor<double> z_vt = random_tensor(rng, 1, 4);
  LevelMask full;
  full.grid = Tensor<std::uint8_t>({2, 2}, 1);
  Tensor<double> rec = reconstruct_level(tokens, full, z_vt, p);
  ASSERT_EQ(rec.rows(), 4u);
  std::vector<std::uint8_t> cells(4, 1);
  Tensor<double> expected = countocc::testing::oracle_reconstruct_level(tokens, cells, z_vt, p);
  EXPECT_LT(max_abs_diff(rec, expected), 1e-10);
}

TEST(Attention, KeyValuePermutationInvariance) {
  // attention is set-valued over (key, value) pairs carried together
  Rng rng(24);
  AttentionParams<double> w{random_tensor(rng, 4, 4), random_tensor(rng, 4, 4),
                            random_tensor(rng, 4, 4), random_tensor(rng, 4, 4)};
  Tensor<double> q = random_tensor(rng, 3, 4);
  Tensor<double> keys = random_tensor(rng, 5, 4);
  Tensor<double> values = random_tensor(rng, 5, 4);
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  Tensor<double> keys_p({5, 4}), values_p({5, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      keys_p(i, j) = keys(perm[i], j);
      values_p(i, j) = values(perm[i], j);
    }

  ad::Tape<double> tp;
  auto run = [&](const Tensor<double>& k, const Tensor<double>& v) {
    return tp.value(multihead_attention(tp, tp.constant(q), tp.constant(k), tp.constant(v),
                                        tp.constant(w.wq), tp.constant(w.wk), tp.constant(w.wv),
                                        tp.constant(w.wo), 2));
  };
  EXPECT_LT(max_abs_diff(run(keys, values), run(keys_p, values_p)), 1e-12);
}

TEST(ReconstructPyramid, PassthroughAndActiveLevels) {
  Rng rng(25);
  FeaturePyramid<double> pyr;
  pyr.levels.push_back({random_tensor(rng, 16, 8), 4, 4});
  pyr.levels.push_back({random_tensor(rng, 4, 8), 2, 2});
  std::vector<FrmLevelParams<double>> params;
  params.push_back(make_frm_level<double>(rng.derive("l0"), 8, 4, 4, 4, 2));
  params.push_back(make_frm_level<double>(rng.derive("l1"), 8, 2, 2, 4, 2));
  Tensor<double> z_vt = random_tensor(rng, 1, 4);

  // all masks zero -> identity
  std::vector<LevelMask> zero_masks{{Tensor<std::uint8_t>({4, 4}, 0)},
                                    {Tensor<std::uint8_t>({2, 2}, 0)}};
  auto out0 = reconstruct_pyramid(pyr, zero_masks, z_vt, params, {true, true});
  EXPECT_EQ(out0.levels[0].tokens, pyr.levels[0].tokens);
  EXPECT_EQ(out0.levels[1].tokens, pyr.levels[1].tokens);

  // occlusion on both levels, but only level 0 active -> level 1 untouched
  std::vector<LevelMask> masks = zero_masks;
  masks[0].grid[2] = 1;
  masks[0].grid[9] = 1;
  masks[1].grid[1] = 1;
  auto out1 = reconstruct_pyramid(pyr, masks, z_vt, params, {true, false});
  EXPECT_NE(out1.levels[0].tokens, pyr.levels[0].tokens);
  EXPECT_EQ(out1.levels[1].tokens, pyr.levels[1].tokens);

  // all levels active: every masked position replaced, visible preserved
  auto out2 = reconstruct_pyramid(pyr, masks, z_vt, params, {true, true});
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < masks[l].grid.size(); ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        if (masks[l].grid[i])
          continue;  // reconstructed cells checked by the oracle test
        ASSERT_EQ(out2.levels[l].tokens(i, j), pyr.levels[l].tokens(i, j));
      }
}

TEST(FrmGradients, MaskEmbeddingGradientFlow) {
  Rng rng(26);
  auto params = make_frm_level<double>(rng.derive("p"), 8, 4, 4, 4, 2);
  Tensor<double> tokens = random_tensor(rng, 16, 8);
  Tensor<double> z_vt = random_tensor(rng, 1, 4);
  Tensor<double> teacher = random_tensor(rng, 3, 8);
  LevelMask mask;
  mask.grid = Tensor<std::uint8_t>({4, 4}, 0);
  mask.grid[1] = mask.grid[6] = mask.grid[11] = 1;

  // N_o >= 1: reconstruction loss gradient w.r.t. mu_mask is nonzero
  ad::Tape<double> tp;
  auto vars = lift_frm_level(tp, params, true);
  auto rec = reconstruct_level_tape(tp, tokens, mask, tp.constant(z_vt), vars);
  LossWeights w;
  auto terms = reconstruction_loss_tape<double>(tp, {rec.reconstructed}, {teacher}, w);
  tp.backward(terms.total);
  double norm = 0.0;
  const auto g = tp.grad(vars.mu_mask);
  for (std::size_t i = 0; i < g.size(); ++i) norm += std::abs(g[i]);
  EXPECT_GT(norm, 1e-8);

  // N_o = 0 at every level: gradient exactly zero (no reconstruction nodes)
  LevelMask zero;
  zero.grid = Tensor<std::uint8_t>({4, 4}, 0);
  ad::Tape<double> tp2;
  auto vars2 = lift_frm_level(tp2, params, true);
  auto rec2 = reconstruct_level_tape(tp2, tokens, zero, tp2.constant(z_vt), vars2);
  EXPECT_FALSE(rec2.reconstructed.valid());
  auto loss2 = tp2.sum_all(rec2.completed);
  tp2.backward(loss2);
  EXPECT_EQ(tp2.grad(vars2.mu_mask), Tensor<double>({1, 8}, 0.0));
}

TEST(FrmGradients, ParameterGradientsMatchFiniteDifferences) {
  // differentiability contract on a tiny instance: random projection of the
  // reconstructed tokens, checked against central differences at step 1e-5
  Rng rng(27);
  auto params = make_frm_level<double>(rng.derive("p"), 4, 2, 3, 4, 2);
  Tensor<double> tokens = random_tensor(rng, 6, 4);
  Tensor<double> z_vt = random_tensor(rng, 1, 4);
  Tensor<double> proj = random_tensor(rng, 3, 4);
  LevelMask mask;
  mask.grid = Tensor<std::uint8_t>({2, 3}, 0);
  mask.grid[0] = mask.grid[4] = mask.grid[5] = 1;

  ad::Tape<double> tp;
  auto vars = lift_frm_level(tp, params, true);
  auto rec = reconstruct_level_tape(tp, tokens, mask, tp.constant(z_vt), vars);
  ad::Var root = tp.sum_all(tp.mul(rec.reconstructed, tp.constant(proj)));
  tp.backward(root);

  struct Probe {
    const char* name;
    Tensor<double>* tensor;
    ad::Var var;
  };
  std::vector<Probe> probes{{"mu_mask", &params.mu_mask, vars.mu_mask},
                            {"sa_wq", &params.self_attn.wq, vars.sa_wq},
                            {"cv_wo", &params.cross_vis.wo, vars.cv_wo},
                            {"cs_wk", &params.cross_sem.wk, vars.cs_wk},
                            {"vt_proj", &params.vt_proj, vars.vt_proj},
                            {"mlp_w1", &params.mlp_w1, vars.mlp_w1},
                            {"mlp_b2", &params.mlp_b2, vars.mlp_b2}};
  for (auto& probe : probes) {
    auto f = [&](const Tensor<double>& x) {
      Tensor<double> saved = *probe.tensor;
      *probe.tensor = x;
      ad::Tape<double> t2;
      auto v2 = lift_frm_level(t2, params, false);
      auto r2 = reconstruct_level_tape(t2, tokens, mask, t2.constant(z_vt), v2);
      const double out = t2.value(t2.sum_all(t2.mul(r2.reconstructed, t2.constant(proj))))[0];
      *probe.tensor = saved;
      return out;
    };
    const Tensor<double> numeric = finite_difference(f, *probe.tensor, 1e-5);
    EXPECT_LT(gradient_error(tp.grad(probe.var), numeric), 1e-4) << probe.name;
  }
}
