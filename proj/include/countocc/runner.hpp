#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "countocc/harness.hpp"
#include "countocc/io/checkpoint.hpp"
#include "countocc/io/coco.hpp"
#include "countocc/io/image_io.hpp"
#include "countocc/io/pyramid_dump.hpp"
#include "countocc/metrics.hpp"
#include "countocc/train.hpp"
#include "json.hpp"

namespace countocc {

/// Flat run configuration (JSON file of scalar keys; COUNTOCC_* environment
/// variables override file values, CLI flags override both).
struct TrainConfig {
  std::uint64_t seed = 7;

  // pipeline
  int image_size = 64;
  int levels = 3;
  int stride0 = 4;
  int base_channels = 16;
  int heads = 4;
  int d_fusion = 16;
  int d_embed = 8;
  int d_head = 8;
  int vocab = 4;
  int topk = 900;
  bool normalize_attention = true;
  std::string frm_levels = "all";  // all | first | none

  // synthetic scenes
  int count_min = 3, count_max = 12;
  double radius_min = 3.0, radius_max = 6.0;
  int distractors_max = 3;
  int clusters_min = 1, clusters_max = 3;
  double cluster_spread = 9.0;
  int train_scenes = 2000;
  int eval_scenes = 200;

  // curriculum
  int stage1_steps = 2500;
  int stage2_steps = 1000;
  int batch_size = 2;
  double lr_stage1 = 0.01;
  double lr_stage2 = 0.005;
  std::string optimizer = "sgd";  // sgd | adam
  std::string viseq_grad = "first_order";  // none | first_order

  // loss weights
  double lambda_l2 = 1.0, lambda_cos = 1.0, lambda_char = 1.0;
  double eps_char = 1e-3;
  double tau = 0.5;
  double w_recon = 0.05, w_count = 0.5, w_sim = 1.0, w_cst = 0.1;

  // training-time occlusion
  double occ_prob = 0.5;
  double alpha_min = 0.15, alpha_max = 0.50;
  int side_min = 12, side_max = 28;
  int max_attempts = 50;
  // fraction of occluded training views drawn with benchmark-style (eval)
  // occluders, mirroring the joint original+OCC training split
  double eval_mask_mix = 0.3;

  // evaluation-time occlusion
  double target_lo = 0.25, target_hi = 0.35;
  int eval_side_max = 28;
};

namespace config_detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <typename T>
void env_key(const char* key, T& out) {
  std::string name = "COUNTOCC_";
  for (const char* c = key; *c; ++c) name.push_back(static_cast<char>(std::toupper(*c)));
  const char* v = std::getenv(name.c_str());
  if (!v) return;
  if constexpr (std::is_same_v<T, std::string>) {
    out = v;
  } else if constexpr (std::is_same_v<T, bool>) {
    out = std::string(v) == "1" || std::string(v) == "true";
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    out = std::strtoull(v, nullptr, 10);
  } else if constexpr (std::is_integral_v<T>) {
    out = static_cast<T>(std::strtoll(v, nullptr, 10));
  } else {
    out = static_cast<T>(std::strtod(v, nullptr));
  }
}

}  // namespace config_detail

#define COUNTOCC_CONFIG_FIELDS(X)                                                              \
  X(seed) X(image_size) X(levels) X(stride0) X(base_channels) X(heads) X(d_fusion) X(d_embed) \
  X(d_head) X(vocab) X(topk) X(normalize_attention) X(frm_levels) X(count_min) X(count_max)   \
  X(radius_min) X(radius_max) X(distractors_max) X(clusters_min) X(clusters_max) \
  X(cluster_spread) X(train_scenes) X(eval_scenes)               \
  X(stage1_steps) X(stage2_steps) X(batch_size) X(lr_stage1) X(lr_stage2) X(optimizer)        \
  X(viseq_grad) X(lambda_l2) X(lambda_cos) X(lambda_char) X(eps_char) X(tau) X(w_recon)       \
  X(w_count) X(w_sim) X(w_cst) X(occ_prob) X(alpha_min) X(alpha_max) X(side_min) X(side_max)  \
  X(max_attempts) X(eval_mask_mix) X(target_lo) X(target_hi) X(eval_side_max)

inline nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
#define COUNTOCC_EMIT(name) j[#name] = c.name;
  COUNTOCC_CONFIG_FIELDS(COUNTOCC_EMIT)
#undef COUNTOCC_EMIT
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool known = false;
#define COUNTOCC_KNOWN(name) known = known || key == #name;
    COUNTOCC_CONFIG_FIELDS(COUNTOCC_KNOWN)
#undef COUNTOCC_KNOWN
    if (!known) throw std::invalid_argument("unknown config key: " + key);
  }
#define COUNTOCC_READ(name) config_detail::read_key(j, #name, c.name);
  COUNTOCC_CONFIG_FIELDS(COUNTOCC_READ)
#undef COUNTOCC_READ
  return c;
}

inline void apply_env_overrides(TrainConfig& c) {
#define COUNTOCC_ENV(name) config_detail::env_key(#name, c.name);
  COUNTOCC_CONFIG_FIELDS(COUNTOCC_ENV)
#undef COUNTOCC_ENV
}

inline PipelineConfig pipeline_config(const TrainConfig& c) {
  PipelineConfig p;
  p.image_h = p.image_w = c.image_size;
  p.levels = c.levels;
  p.stride0 = c.stride0;
  p.base_channels = c.base_channels;
  p.heads = c.heads;
  p.d_fusion = c.d_fusion;
  p.d_embed = c.d_embed;
  p.d_head = c.d_head;
  p.vocab = c.vocab;
  p.topk = c.topk;
  p.normalize_attention = c.normalize_attention;
  p.frm_active.assign(static_cast<std::size_t>(c.levels), true);
  if (c.frm_levels == "none")
    p.frm_active.assign(static_cast<std::size_t>(c.levels), false);
  else if (c.frm_levels == "first")
    for (int l = 1; l < c.levels; ++l) p.frm_active[static_cast<std::size_t>(l)] = false;
  else if (c.frm_levels != "all")
    throw std::invalid_argument("frm_levels must be all|first|none");
  p.validate();
  return p;
}

inline SceneConfig scene_config(const TrainConfig& c) {
  SceneConfig s;
  s.width = s.height = c.image_size;
  s.count_min = c.count_min;
  s.count_max = c.count_max;
  s.radius_min = c.radius_min;
  s.radius_max = c.radius_max;
  s.distractors_max = c.distractors_max;
  s.vocab = c.vocab;
  s.clusters_min = c.clusters_min;
  s.clusters_max = c.clusters_max;
  s.cluster_spread = c.cluster_spread;
  return s;
}

inline TrainHyper train_hyper(const TrainConfig& c) {
  TrainHyper h;
  h.lr_stage1 = c.lr_stage1;
  h.lr_stage2 = c.lr_stage2;
  h.w_recon = c.w_recon;
  h.w_count = c.w_count;
  h.w_sim = c.w_sim;
  h.w_cst = c.w_cst;
  h.tau = c.tau;
  h.recon_weights = {c.lambda_l2, c.lambda_cos, c.lambda_char, c.eps_char};
  if (c.viseq_grad == "none")
    h.viseq_grad = VisEqGrad::kNone;
  else if (c.viseq_grad == "first_order")
    h.viseq_grad = VisEqGrad::kFirstOrder;
  else
    throw std::invalid_argument("viseq_grad must be none|first_order");
  if (c.optimizer == "sgd")
    h.optimizer = OptimizerKind::kSgd;
  else if (c.optimizer == "adam")
    h.optimizer = OptimizerKind::kAdam;
  else
    throw std::invalid_argument("optimizer must be sgd|adam");
  h.batch_size = c.batch_size;
  return h;
}

inline TrainOccConfig train_occ_config(const TrainConfig& c) {
  return {c.occ_prob, c.alpha_min, c.alpha_max, c.side_min, c.side_max, c.max_attempts};
}

inline EvalOccConfig eval_occ_config(const TrainConfig& c) {
  return {c.target_lo, c.target_hi, c.eval_side_max, 0};
}

// ---------------------------------------------------------------------------
// Checkpoint glue

template <typename T>
std::vector<CheckpointEntry> checkpoint_entries(ModelParams<T>& params) {
  std::vector<CheckpointEntry> entries;
  params.visit([&](const std::string& name, Tensor<double>& t, bool) {
    entries.push_back({name, &t});
  });
  return entries;
}

struct LoadedModel {
  TrainConfig config;
  PipelineConfig pcfg;
  ModelParams<double> params;
};

inline LoadedModel load_model(const std::string& checkpoint_prefix) {
  // peek the embedded config first, then size the model and load weights
  std::ifstream man(checkpoint_prefix + ".json");
  if (!man) throw std::runtime_error("cannot open checkpoint: " + checkpoint_prefix + ".json");
  nlohmann::json manifest;
  man >> manifest;
  LoadedModel m{config_from_json(manifest.at("config")), {}, {}};
  m.pcfg = pipeline_config(m.config);
  m.params = init_model<double>(m.pcfg, Rng(m.config.seed).derive("model"));
  auto entries = checkpoint_entries(m.params);
  load_checkpoint(checkpoint_prefix, entries);
  return m;
}

// ---------------------------------------------------------------------------
// Held-out evaluation

struct ValScene {
  SyntheticScene scene;
  OcclusionMask mask;
};

inline std::vector<ValScene> make_val_set(const TrainConfig& cfg, const Rng& master) {
  const SceneConfig scfg = scene_config(cfg);
  const EvalOccConfig ecfg = eval_occ_config(cfg);
  std::vector<ValScene> out;
  for (int i = 0; i < cfg.eval_scenes; ++i) {
    Rng sr = master.derive("val_scene", static_cast<std::uint64_t>(i));
    Rng mr = master.derive("val_mask", static_cast<std::uint64_t>(i));
    SyntheticScene scene = generate_scene(scfg, sr);
    OcclusionMask mask = build_eval_mask(scene.annotations, ecfg, mr);
    out.push_back({std::move(scene), std::move(mask)});
  }
  return out;
}

inline MetricsReport evaluate_counts(std::vector<ValScene>& valset, ModelParams<double>& params,
                                     const PipelineConfig& pcfg, bool use_frm) {
  std::vector<PerImageRecord> records;
  for (std::size_t i = 0; i < valset.size(); ++i) {
    const auto& v = valset[i];
    const CountSplit c = predict_counts(v.scene, v.mask, params, pcfg, use_frm);
    const auto [vis, occ] = count_occluded_instances(v.mask, v.scene.annotations.boxes);
    PerImageRecord r;
    r.id = static_cast<int>(i);
    r.y = static_cast<double>(v.scene.count);
    r.y_hat = c.total;
    r.y_vis = static_cast<double>(vis);
    r.y_hat_vis = c.visible;
    r.y_occ = static_cast<double>(occ);
    r.y_hat_occ = c.occluded;
    records.push_back(r);
  }
  return build_report(std::move(records));
}

/// Mean reconstruction-loss total over the held-out set (the Eq.-9 objective
/// evaluated without updating anything).
inline double evaluate_reconstruction(std::vector<ValScene>& valset, ModelParams<double>& params,
                                      const PipelineConfig& pcfg, const LossWeights& weights) {
  double total = 0.0;
  for (auto& v : valset) {
    ad::Tape<double> tp;
    LiftedModel<double> lm = lift_model(tp, params, false);
    PipelineGraph<double> student =
        pipeline_tape(tp, v.scene.image, &v.mask, v.scene, params, lm, pcfg, true);
    const FeaturePyramid<double> teacher = backbone_forward(v.scene.image, params, pcfg);
    std::vector<ad::Var> tokens;
    for (const auto& r : student.reconstructions) tokens.push_back(r.reconstructed);
    auto terms = reconstruction_loss_tape(tp, tokens, teacher_targets(teacher, student),
                                          LossWeights{weights});
    total += tp.value(terms.total)[0];
  }
  return total / static_cast<double>(valset.size());
}

/// Mean pixelwise squared distance between teacher and student attention maps
/// over the held-out set (the L_sim l2 term on normalized maps).
inline double evaluate_attention_l2(std::vector<ValScene>& valset, ModelParams<double>& params,
                                    const PipelineConfig& pcfg) {
  AutodiffGradientOracle<double> oracle;
  double total = 0.0;
  for (auto& v : valset) {
    ForwardResult<double> teacher = forward_plain(v.scene, nullptr, params, pcfg, false);
    AttentionMap<double> g_t =
        attention_map_of(teacher.completed, teacher.z_vt, params, pcfg, oracle);
    ForwardResult<double> student = forward_plain(v.scene, &v.mask, params, pcfg, true);
    AttentionMap<double> g_s =
        attention_map_of(student.completed, student.z_vt, params, pcfg, oracle);
    LossWeights w;
    w.lambda_cos = 0.0;
    total += attention_similarity_loss(g_t.map, g_s.map, w).l2;
  }
  return total / static_cast<double>(valset.size());
}

// ---------------------------------------------------------------------------
// Training run

struct TrainSummary {
  double recon_val_step0 = 0;
  double recon_val_stage1_end = 0;
  double mae_stage1 = 0, rmse_stage1 = 0;
  double mae_stage1_bypass = 0;
  double attn_l2_stage2_start = 0;
  double attn_l2_stage2_end = 0;
  double mae_stage2 = 0, rmse_stage2 = 0;
  double mae_stage2_bypass = 0;
  double recon_val_stage2_end = 0;
};

inline nlohmann::ordered_json summary_to_json(const TrainSummary& s) {
  nlohmann::ordered_json j;
  j["recon_val_step0"] = s.recon_val_step0;
  j["recon_val_stage1_end"] = s.recon_val_stage1_end;
  j["mae_stage1"] = s.mae_stage1;
  j["rmse_stage1"] = s.rmse_stage1;
  j["mae_stage1_bypass"] = s.mae_stage1_bypass;
  j["attn_l2_stage2_start"] = s.attn_l2_stage2_start;
  j["attn_l2_stage2_end"] = s.attn_l2_stage2_end;
  j["mae_stage2"] = s.mae_stage2;
  j["rmse_stage2"] = s.rmse_stage2;
  j["mae_stage2_bypass"] = s.mae_stage2_bypass;
  j["recon_val_stage2_end"] = s.recon_val_stage2_end;
  return j;
}

inline std::string code_version() {
  std::FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (std::fgets(buf, sizeof(buf), pipe)) out += buf;
  ::pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

/// Two-stage curriculum over the synthetic benchmark. Writes, under out_dir:
/// resolved_config.json, manifest.json, train_log.jsonl, checkpoint.{json,bin},
/// metrics_report.json and summary.json. Artifacts carry no timestamps, so a
/// rerun with the same seed is byte-identical.
inline TrainSummary run_training(const TrainConfig& cfg, const std::string& out_dir,
                                 bool quiet = false) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const PipelineConfig pcfg = pipeline_config(cfg);
  const SceneConfig scfg = scene_config(cfg);
  const TrainHyper hyper = train_hyper(cfg);
  const TrainOccConfig tocc = train_occ_config(cfg);
  const EvalOccConfig eocc = eval_occ_config(cfg);
  const Rng master(cfg.seed);

  ModelParams<double> params = init_model<double>(pcfg, master.derive("model"));

  // frozen-backbone audit copy
  std::vector<Tensor<double>> backbone_init;
  for (const auto& b : params.backbone) {
    backbone_init.push_back(b.w);
    backbone_init.push_back(b.b);
  }

  std::vector<ValScene> valset = make_val_set(cfg, master);

  {
    std::ofstream rc(out_dir + "/resolved_config.json");
    rc << config_to_json(cfg).dump(2) << "\n";
  }

  std::ofstream log(out_dir + "/train_log.jsonl");
  if (!log) throw std::runtime_error("cannot open train log for write");

  TrainSummary summary;
  summary.recon_val_step0 = evaluate_reconstruction(valset, params, pcfg, hyper.recon_weights);

  OptimizerState<double> opt;
  Rng occ_rng = master.derive("train_occ");
  const auto scene_for = [&](std::int64_t index) {
    const auto pool_index =
        static_cast<std::uint64_t>(index % std::max<std::int64_t>(1, cfg.train_scenes));
    Rng sr = master.derive("train_scene", pool_index);
    return generate_scene(scfg, sr);
  };

  std::int64_t cursor = 0;
  const auto run_stage = [&](int stage, int steps) {
    for (int s = 0; s < steps; ++s) {
      std::vector<SyntheticScene> scenes;
      std::vector<OcclusionMask> masks;
      for (int b = 0; b < hyper.batch_size; ++b) {
        scenes.push_back(scene_for(cursor++));
        if (occ_rng.uniform() < cfg.eval_mask_mix)
          masks.push_back(build_eval_mask(scenes.back().annotations, eocc, occ_rng));
        else
          masks.push_back(sample_training_mask(scenes.back().annotations, tocc, occ_rng));
      }
      std::vector<const SyntheticScene*> sp;
      std::vector<const OcclusionMask*> mp;
      for (int b = 0; b < hyper.batch_size; ++b) {
        sp.push_back(&scenes[static_cast<std::size_t>(b)]);
        mp.push_back(&masks[static_cast<std::size_t>(b)]);
      }
      const int global_step = stage == 1 ? s : cfg.stage1_steps + s;
      TrainLogRecord rec = train_step(sp, mp, stage, global_step, params, opt, hyper, pcfg);
      log << record_to_json(rec).dump() << "\n";
      if (!quiet && global_step % 200 == 0)
        std::fprintf(stderr, "step %d (stage %d): total %.4f\n", global_step, stage, rec.total);
    }
  };

  run_stage(1, cfg.stage1_steps);
  summary.recon_val_stage1_end = evaluate_reconstruction(valset, params, pcfg, hyper.recon_weights);
  {
    MetricsReport on = evaluate_counts(valset, params, pcfg, true);
    MetricsReport off = evaluate_counts(valset, params, pcfg, false);
    summary.mae_stage1 = on.mae;
    summary.rmse_stage1 = on.rmse;
    summary.mae_stage1_bypass = off.mae;
  }
  summary.attn_l2_stage2_start = evaluate_attention_l2(valset, params, pcfg);

  run_stage(2, cfg.stage2_steps);
  summary.attn_l2_stage2_end = evaluate_attention_l2(valset, params, pcfg);
  summary.recon_val_stage2_end = evaluate_reconstruction(valset, params, pcfg, hyper.recon_weights);
  MetricsReport final_on = evaluate_counts(valset, params, pcfg, true);
  MetricsReport final_off = evaluate_counts(valset, params, pcfg, false);
  summary.mae_stage2 = final_on.mae;
  summary.rmse_stage2 = final_on.rmse;
  summary.mae_stage2_bypass = final_off.mae;

  // frozen-backbone contract must hold after any number of steps
  std::size_t k = 0;
  for (const auto& b : params.backbone) {
    if (!(backbone_init[k++] == b.w) || !(backbone_init[k++] == b.b))
      throw std::logic_error("frozen backbone was modified during training");
  }

  save_checkpoint(out_dir + "/checkpoint", checkpoint_entries(params), config_to_json(cfg));
  {
    std::ofstream rep(out_dir + "/metrics_report.json");
    rep << report_to_json(final_on).dump(2) << "\n";
  }
  {
    nlohmann::ordered_json manifest;
    manifest["config"] = config_to_json(cfg);
    manifest["master_seed"] = cfg.seed;
    manifest["stage_boundaries"] = {cfg.stage1_steps, cfg.stage1_steps + cfg.stage2_steps};
    manifest["loss_weights"] = {{"lambda_l2", cfg.lambda_l2},
                                {"lambda_cos", cfg.lambda_cos},
                                {"lambda_char", cfg.lambda_char},
                                {"eps_char", cfg.eps_char},
                                {"tau", cfg.tau}};
    manifest["code_version"] = code_version();
    std::ofstream man(out_dir + "/manifest.json");
    man << manifest.dump(2) << "\n";
  }
  {
    std::ofstream sum(out_dir + "/summary.json");
    sum << summary_to_json(summary).dump(2) << "\n";
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Dataset generation (gen-toy / gen-occ)

inline void gen_toy_dataset(const TrainConfig& cfg, int num_scenes, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/images");
  const SceneConfig scfg = scene_config(cfg);
  const Rng master(cfg.seed);
  CocoDataset ds;
  for (int v = 0; v < cfg.vocab; ++v) ds.categories.push_back({v, "class" + std::to_string(v)});
  int ann_id = 0;
  for (int i = 0; i < num_scenes; ++i) {
    Rng sr = master.derive("toy_scene", static_cast<std::uint64_t>(i));
    SyntheticScene scene = generate_scene(scfg, sr);
    char name[64];
    std::snprintf(name, sizeof(name), "images/scene_%05d.ppm", i);
    write_ppm(out_dir + "/" + name, scene.image);
    CocoImageEntry img;
    img.id = i;
    img.width = scene.annotations.width;
    img.height = scene.annotations.height;
    img.file_name = name;
    img.category_id = scene.annotations.class_id;
    img.exemplars = scene.annotations.exemplars;
    ds.images.push_back(img);
    for (const auto& b : scene.annotations.boxes)
      ds.annotations.push_back({ann_id++, i, scene.annotations.class_id, b});
  }
  save_dataset(ds, out_dir + "/annotations.json");
}

/// Apply train- or eval-style occluders to an existing dataset, writing
/// occluded images, mask rasters and the extended annotation document.
inline void gen_occ_dataset(const std::string& in_dir, const std::string& out_dir,
                            const std::string& mode, std::uint64_t seed,
                            const TrainOccConfig& tocc, const EvalOccConfig& eocc) {
  namespace fs = std::filesystem;
  if (mode != "train" && mode != "eval")
    throw std::invalid_argument("gen-occ mode must be train|eval");
  fs::create_directories(out_dir + "/images");
  fs::create_directories(out_dir + "/images_occ");
  fs::create_directories(out_dir + "/masks");
  CocoDataset ds = load_dataset(in_dir + "/annotations.json");
  const Rng master(seed);
  for (auto& img : ds.images) {
    AnnotatedScene scene = to_scene(ds, img);
    Rng r = master.derive("occ", static_cast<std::uint64_t>(img.id));
    OcclusionMask mask = mode == "train" ? sample_training_mask(scene, tocc, r)
                                         : build_eval_mask(scene, eocc, r);
    const Tensor<double> image = read_ppm(in_dir + "/" + img.file_name);
    const Tensor<double> occluded = apply_mask(image, mask);

    const std::string base = fs::path(img.file_name).filename().string();
    const std::string mask_name = fs::path(base).stem().string() + ".pgm";
    write_ppm(out_dir + "/images/" + base, image);
    write_ppm(out_dir + "/images_occ/" + base, occluded);
    write_pgm(out_dir + "/masks/" + mask_name, mask_to_bytes(mask.mask));

    img.file_name = "images/" + base;
    img.occ_file_name = "images_occ/" + base;
    img.mask_file_name = "masks/" + mask_name;
    img.has_occlusion = true;
    img.occ_rectangles = mask.rectangles;
    img.occluded_ids = mask.occluded_instance_ids;
    img.occ_fallback = mask.fallback;
    img.occ_window_infeasible = mask.window_infeasible;
  }
  save_dataset(ds, out_dir + "/annotations.json");
}

// ---------------------------------------------------------------------------
// Disk-dataset evaluation and heatmap export

/// Evaluate a checkpoint over an occlusion-augmented dataset manifest.
/// Per-image failures are recorded and skipped; the report is still written.
inline MetricsReport run_evaluation(const std::string& checkpoint_prefix,
                                    const std::string& manifest_path,
                                    const std::string& report_path, bool bypass_frm) {
  LoadedModel model = load_model(checkpoint_prefix);
  const std::string dir = std::filesystem::path(manifest_path).parent_path().string();
  CocoDataset ds = load_dataset(manifest_path);

  std::vector<PerImageRecord> records;
  std::vector<std::string> errors;
  for (const auto& img : ds.images) {
    try {
      if (!img.has_occlusion) throw std::runtime_error("image has no occlusion record");
      if (img.width != model.pcfg.image_w || img.height != model.pcfg.image_h)
        throw std::runtime_error("image size does not match the checkpointed pipeline");
      SyntheticScene scene;
      scene.annotations = to_scene(ds, img);
      scene.count = static_cast<int>(scene.annotations.boxes.size());
      scene.image = read_ppm(dir + "/" + img.occ_file_name);
      OcclusionMask mask = mask_from_entry(img);

      const CountSplit c = predict_counts(scene, mask, model.params, model.pcfg, !bypass_frm);
      PerImageRecord r;
      r.id = img.id;
      r.y = static_cast<double>(scene.count);
      r.y_hat = c.total;
      r.y_occ = static_cast<double>(img.occluded_ids.size());
      r.y_vis = r.y - r.y_occ;
      r.y_hat_vis = c.visible;
      r.y_hat_occ = c.occluded;
      records.push_back(r);
    } catch (const std::exception& e) {
      errors.push_back("image " + std::to_string(img.id) + ": " + e.what());
    }
  }
  if (records.empty()) throw std::runtime_error("evaluation produced no usable images");
  MetricsReport report = build_report(std::move(records), std::move(errors));
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw std::runtime_error("cannot open report for write: " + report_path);
    out << report_to_json(report).dump(2) << "\n";
  }
  return report;
}

/// Fig.-4-style inspection: exports {id}_teacher.pgm / {id}_student.pgm (and
/// optionally the student's completed pyramid dump).
inline void run_gradcam_export(const std::string& checkpoint_prefix,
                               const std::string& manifest_path, int image_id,
                               const std::string& out_dir,
                               const std::string& pyramid_dump_path = {}) {
  namespace fs = std::filesystem;
  LoadedModel model = load_model(checkpoint_prefix);
  const std::string dir = fs::path(manifest_path).parent_path().string();
  CocoDataset ds = load_dataset(manifest_path);
  const CocoImageEntry* entry = nullptr;
  for (const auto& img : ds.images)
    if (img.id == image_id) entry = &img;
  if (!entry) throw std::runtime_error("image id not found: " + std::to_string(image_id));
  if (!entry->has_occlusion) throw std::runtime_error("image has no occlusion record");
  fs::create_directories(out_dir);

  SyntheticScene clean;
  clean.annotations = to_scene(ds, *entry);
  clean.count = static_cast<int>(clean.annotations.boxes.size());
  clean.image = read_ppm(dir + "/" + entry->file_name);
  SyntheticScene occluded = clean;
  occluded.image = read_ppm(dir + "/" + entry->occ_file_name);
  OcclusionMask mask = mask_from_entry(*entry);

  AutodiffGradientOracle<double> oracle;
  ForwardResult<double> teacher = forward_plain(clean, nullptr, model.params, model.pcfg, false);
  AttentionMap<double> g_t =
      attention_map_of(teacher.completed, teacher.z_vt, model.params, model.pcfg, oracle);
  ForwardResult<double> student =
      forward_plain(occluded, &mask, model.params, model.pcfg, true);
  AttentionMap<double> g_s =
      attention_map_of(student.completed, student.z_vt, model.params, model.pcfg, oracle);

  const std::string stem = out_dir + "/" + std::to_string(image_id);
  write_pgm(stem + "_teacher.pgm", heatmap_to_bytes(g_t.map));
  write_pgm(stem + "_student.pgm", heatmap_to_bytes(g_s.map));
  if (!pyramid_dump_path.empty()) dump_pyramid(student.completed, pyramid_dump_path);
}

}  // namespace countocc
