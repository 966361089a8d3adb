#include <gtest/gtest.h>

#include <cmath>

#include "countocc/harness.hpp"
#include "countocc/runner.hpp"
#include "countocc/train.hpp"
#include "test_util.hpp"

using namespace countocc;
using countocc::testing::max_abs_diff;

namespace {

TrainConfig tiny_cfg(std::uint64_t seed = 11) {
  TrainConfig c;
  c.seed = seed;
  c.image_size = 32;
  c.levels = 2;
  c.stride0 = 4;
  c.base_channels = 8;
  c.heads = 2;
  c.d_fusion = 8;
  c.d_embed = 4;
  c.d_head = 4;
  c.vocab = 3;
  c.count_min = 2;
  c.count_max = 6;
  c.radius_min = 2.0;
  c.radius_max = 4.0;
  c.side_min = 8;
  c.side_max = 14;
  c.batch_size = 2;
  return c;
}

}  // namespace

TEST(SceneGen, CountRangeAndDeterminism) {
  SceneConfig cfg;
  cfg.count_min = cfg.count_max = 5;
  Rng a(3), b(3);
  SyntheticScene s1 = generate_scene(cfg, a);
  SyntheticScene s2 = generate_scene(cfg, b);
  EXPECT_EQ(s1.count, 5);
  EXPECT_EQ(s1.annotations.boxes.size(), 5u);
  EXPECT_EQ(s1.image, s2.image);  // bit-identical under the same seed
  EXPECT_EQ(s1.annotations.class_id, s2.annotations.class_id);
  // discs inside bounds
  for (const auto& box : s1.annotations.boxes) {
    EXPECT_GE(box.x_min, 0.0);
    EXPECT_GE(box.y_min, 0.0);
    EXPECT_LE(box.x_max, cfg.width);
    EXPECT_LE(box.y_max, cfg.height);
  }
  EXPECT_EQ(s1.annotations.exemplars.size(), 3u);
}

TEST(SceneGen, EmpiricalMeanCount) {
  SceneConfig cfg;
  cfg.count_min = 3;
  cfg.count_max = 12;
  Rng master(99);
  double total = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    Rng r = master.derive("s", i);
    total += generate_scene(cfg, r).count;
  }
  const double mean = total / n;
  EXPECT_GE(mean, 7.0);
  EXPECT_LE(mean, 8.0);
}

TEST(Backbone, ShapesAndDeterminism) {
  TrainConfig cfg = tiny_cfg();
  PipelineConfig pcfg = pipeline_config(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(1).derive("model"));
  Rng sr(2);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);
  FeaturePyramid<double> p1 = backbone_forward(scene.image, params, pcfg);
  FeaturePyramid<double> p2 = backbone_forward(scene.image, params, pcfg);
  p1.validate();
  ASSERT_EQ(p1.levels.size(), 2u);
  EXPECT_EQ(p1.levels[0].tokens.rows(), 64u);  // 8x8 grid
  EXPECT_EQ(p1.levels[0].tokens.cols(), 8u);
  EXPECT_EQ(p1.levels[1].tokens.rows(), 16u);  // 4x4 grid
  EXPECT_EQ(p1.levels[1].tokens.cols(), 16u);
  EXPECT_EQ(p1.levels[0].tokens, p2.levels[0].tokens);
}

TEST(Pipeline, ZeroOcclusionEquivalence) {
  TrainConfig cfg = tiny_cfg();
  PipelineConfig pcfg = pipeline_config(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(4).derive("model"));
  Rng sr(5);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);

  ForwardResult<double> teacher = forward_plain(scene, nullptr, params, pcfg, false);
  OcclusionMask zero = OcclusionMask::empty(cfg.image_size, cfg.image_size);
  ForwardResult<double> student = forward_plain(scene, &zero, params, pcfg, true);

  for (std::size_t l = 0; l < teacher.completed.levels.size(); ++l)
    ASSERT_EQ(student.completed.levels[l].tokens, teacher.completed.levels[l].tokens);
  EXPECT_EQ(student.density, teacher.density);
  EXPECT_EQ(student.logits, teacher.logits);
  EXPECT_EQ(student.z_vt, teacher.z_vt);
}

TEST(Pipeline, FullMaskStillRunsAndDiffers) {
  TrainConfig cfg = tiny_cfg();
  PipelineConfig pcfg = pipeline_config(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(6).derive("model"));
  Rng sr(7);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);
  OcclusionMask full = OcclusionMask::empty(cfg.image_size, cfg.image_size);
  occ_detail::paint(full, {0, 0, cfg.image_size, cfg.image_size});

  ForwardResult<double> teacher = forward_plain(scene, nullptr, params, pcfg, false);
  ForwardResult<double> student = forward_plain(scene, &full, params, pcfg, true);
  EXPECT_GT(max_abs_diff(student.density, teacher.density), 0.0);
}

TEST(Counts, SplitAdditiveAndMaskConsistent) {
  TrainConfig cfg = tiny_cfg();
  PipelineConfig pcfg = pipeline_config(cfg);

  // idealized count map: unit mass at known cells, 4 visible + 2 occluded
  Tensor<double> density({pcfg.head_grid(), 1}, 0.0);
  OcclusionMask mask = OcclusionMask::empty(cfg.image_size, cfg.image_size);
  occ_detail::paint(mask, {0, 0, 12, 12});  // covers level-0 cells with y,x < 3
  const std::size_t gw = pcfg.grid_w(0);
  density(0 * gw + 0, 0) = 1.0;  // occluded cell
  density(1 * gw + 2, 0) = 1.0;  // occluded cell
  density(5 * gw + 5, 0) = 1.0;
  density(6 * gw + 1, 0) = 1.0;
  density(3 * gw + 7, 0) = 1.0;
  density(7 * gw + 7, 0) = 1.0;
  CountSplit c = split_counts(density, mask, pcfg);
  EXPECT_DOUBLE_EQ(c.total, 6.0);
  EXPECT_DOUBLE_EQ(c.visible, 4.0);
  EXPECT_DOUBLE_EQ(c.occluded, 2.0);

  // zero mask: everything visible
  OcclusionMask zero = OcclusionMask::empty(cfg.image_size, cfg.image_size);
  CountSplit cz = split_counts(density, zero, pcfg);
  EXPECT_DOUBLE_EQ(cz.occluded, 0.0);
  EXPECT_DOUBLE_EQ(cz.total, cz.visible);

  // full mask: nothing visible
  OcclusionMask full = OcclusionMask::empty(cfg.image_size, cfg.image_size);
  occ_detail::paint(full, {0, 0, cfg.image_size, cfg.image_size});
  CountSplit cf = split_counts(density, full, pcfg);
  EXPECT_DOUBLE_EQ(cf.visible, 0.0);
}

TEST(Counts, AdditivityExactOnModelOutput) {
  TrainConfig cfg = tiny_cfg();
  PipelineConfig pcfg = pipeline_config(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(8).derive("model"));
  const TrainOccConfig tocc = train_occ_config(cfg);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    Rng sr = rng.derive("s", trial);
    SyntheticScene scene = generate_scene(scene_config(cfg), sr);
    Rng mr = rng.derive("m", trial);
    OcclusionMask mask = sample_training_mask(scene.annotations, tocc, mr);
    CountSplit c = predict_counts(scene, mask, params, pcfg, true);
    ASSERT_GE(c.visible, 0.0);
    ASSERT_GE(c.occluded, 0.0);
    ASSERT_EQ(c.total, c.visible + c.occluded);  // exact by construction
  }
}

TEST(TrainStep, StageGatingAndFrozenBackbone) {
  TrainConfig cfg = tiny_cfg();
  cfg.occ_prob = 1.0;
  PipelineConfig pcfg = pipeline_config(cfg);
  TrainHyper hyper = train_hyper(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(10).derive("model"));

  std::vector<Tensor<double>> backbone_before;
  for (const auto& b : params.backbone) {
    backbone_before.push_back(b.w);
    backbone_before.push_back(b.b);
  }
  const Tensor<double> mu_before = params.frm[0].mu_mask;

  Rng sr(11), mr(12);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);
  OcclusionMask mask = sample_training_mask(scene.annotations, train_occ_config(cfg), mr);
  OptimizerState<double> opt;

  TrainLogRecord r1 = train_step<double>({&scene}, {&mask}, 1, 0, params, opt, hyper, pcfg);
  EXPECT_FALSE(r1.sim_l2.has_value());  // VisEQ terms absent from stage-1 records
  EXPECT_FALSE(r1.cst.has_value());
  EXPECT_EQ(r1.stage, 1);

  TrainLogRecord r2 = train_step<double>({&scene}, {&mask}, 2, 1, params, opt, hyper, pcfg);
  EXPECT_TRUE(r2.sim_l2.has_value());
  EXPECT_TRUE(r2.sim_cos.has_value());

  // backbone bit-identical after steps; trainables moved
  std::size_t k = 0;
  for (const auto& b : params.backbone) {
    EXPECT_EQ(backbone_before[k++], b.w);
    EXPECT_EQ(backbone_before[k++], b.b);
  }
  EXPECT_NE(params.frm[0].mu_mask, mu_before);

  EXPECT_THROW(
      train_step<double>({&scene}, {&mask}, 3, 2, params, opt, hyper, pcfg),
      std::invalid_argument);
}

TEST(TrainStep, TeacherFeatureTargetsAreInvariant) {
  // the distillation targets come from the frozen backbone: identical before
  // and after training steps
  TrainConfig cfg = tiny_cfg();
  cfg.occ_prob = 1.0;
  PipelineConfig pcfg = pipeline_config(cfg);
  TrainHyper hyper = train_hyper(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(13).derive("model"));
  Rng sr(14), mr(15);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);
  OcclusionMask mask = sample_training_mask(scene.annotations, train_occ_config(cfg), mr);

  FeaturePyramid<double> before = backbone_forward(scene.image, params, pcfg);
  OptimizerState<double> opt;
  for (int s = 0; s < 3; ++s)
    train_step<double>({&scene}, {&mask}, 1, s, params, opt, hyper, pcfg);
  FeaturePyramid<double> after = backbone_forward(scene.image, params, pcfg);
  for (std::size_t l = 0; l < before.levels.size(); ++l)
    ASSERT_EQ(before.levels[l].tokens, after.levels[l].tokens);
}

TEST(TrainStep, LossDecreasesOnRepeatedScene) {
  TrainConfig cfg = tiny_cfg();
  cfg.occ_prob = 1.0;
  PipelineConfig pcfg = pipeline_config(cfg);
  TrainHyper hyper = train_hyper(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(16).derive("model"));
  Rng sr(17), mr(18);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);
  OcclusionMask mask = sample_training_mask(scene.annotations, train_occ_config(cfg), mr);
  OptimizerState<double> opt;
  double first = 0, last = 0;
  for (int s = 0; s < 40; ++s) {
    TrainLogRecord r = train_step<double>({&scene}, {&mask}, 1, s, params, opt, hyper, pcfg);
    if (s == 0) first = r.total;
    last = r.total;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(Fusion, DependsOnClassId) {
  TrainConfig cfg = tiny_cfg();
  PipelineConfig pcfg = pipeline_config(cfg);
  ModelParams<double> params = init_model<double>(pcfg, Rng(19).derive("model"));
  Rng sr(20);
  SyntheticScene scene = generate_scene(scene_config(cfg), sr);
  ForwardResult<double> a = forward_plain(scene, nullptr, params, pcfg, false);
  SyntheticScene other = scene;
  other.annotations.class_id = (scene.annotations.class_id + 1) % cfg.vocab;
  ForwardResult<double> b = forward_plain(other, nullptr, params, pcfg, false);
  EXPECT_GT(max_abs_diff(a.z_vt, b.z_vt), 0.0);
  EXPECT_GT(max_abs_diff(a.density, b.density), 0.0);  // language-conditioned head
}

TEST(Runner, ConfigRoundTripAndEnvOverride) {
  TrainConfig cfg = tiny_cfg(123);
  nlohmann::ordered_json j = config_to_json(cfg);
  TrainConfig back = config_from_json(j);
  EXPECT_EQ(back.seed, 123u);
  EXPECT_EQ(back.image_size, cfg.image_size);
  EXPECT_EQ(back.frm_levels, cfg.frm_levels);

  nlohmann::json bad = j;
  bad["not_a_key"] = 1;
  EXPECT_THROW(config_from_json(bad), std::invalid_argument);

  ::setenv("COUNTOCC_STAGE1_STEPS", "77", 1);
  ::setenv("COUNTOCC_OPTIMIZER", "adam", 1);
  apply_env_overrides(back);
  ::unsetenv("COUNTOCC_STAGE1_STEPS");
  ::unsetenv("COUNTOCC_OPTIMIZER");
  EXPECT_EQ(back.stage1_steps, 77);
  EXPECT_EQ(back.optimizer, "adam");
}

TEST(Runner, FrmLevelModes) {
  TrainConfig cfg = tiny_cfg();
  cfg.frm_levels = "first";
  PipelineConfig p = pipeline_config(cfg);
  EXPECT_TRUE(p.level_active(0));
  EXPECT_FALSE(p.level_active(1));
  cfg.frm_levels = "none";
  p = pipeline_config(cfg);
  EXPECT_FALSE(p.level_active(0));
  cfg.frm_levels = "bogus";
  EXPECT_THROW(pipeline_config(cfg), std::invalid_argument);
}
