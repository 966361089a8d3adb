// countocc: synthetic occlusion benchmarks, amodal-counting training and
// evaluation for the toy teacher-student pipeline.

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "countocc/gradcheck.hpp"
#include "countocc/runner.hpp"

namespace {

countocc::TrainConfig resolve_config(const std::string& config_path) {
  countocc::TrainConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config: " + config_path);
    nlohmann::json j;
    in >> j;
    cfg = countocc::config_from_json(j);
  }
  countocc::apply_env_overrides(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CountOCC toy pipeline: occlusion synthesis, feature reconstruction training, "
               "GradCAM inspection and counting metrics"};
  app.require_subcommand(1);

  // ---- gen-toy ----
  auto* gen_toy = app.add_subcommand("gen-toy", "generate a synthetic dot-scene dataset");
  std::string gt_out = "toy_dataset";
  int gt_num = 200;
  std::optional<std::uint64_t> gt_seed;
  std::optional<int> gt_image, gt_cmin, gt_cmax, gt_vocab;
  gen_toy->add_option("--out", gt_out, "output dataset directory");
  gen_toy->add_option("--num-scenes", gt_num, "number of scenes");
  gen_toy->add_option("--seed", gt_seed, "master seed");
  gen_toy->add_option("--image-size", gt_image, "square image size");
  gen_toy->add_option("--count-min", gt_cmin, "minimum instances per scene");
  gen_toy->add_option("--count-max", gt_cmax, "maximum instances per scene");
  gen_toy->add_option("--classes", gt_vocab, "vocabulary size");

  // ---- gen-occ ----
  auto* gen_occ = app.add_subcommand("gen-occ", "occlusion-augment an existing dataset");
  std::string go_in, go_out, go_mode = "eval";
  std::uint64_t go_seed = 7;
  countocc::TrainOccConfig go_tocc;  // paper defaults: p=0.5, sides 128-256, 50 attempts
  countocc::EvalOccConfig go_eocc;   // paper defaults: 25-35%, side <= 256
  gen_occ->add_option("--in", go_in, "input dataset directory")->required();
  gen_occ->add_option("--out", go_out, "output dataset directory")->required();
  gen_occ->add_option("--mode", go_mode, "train|eval occlusion strategy");
  gen_occ->add_option("--seed", go_seed, "master seed");
  gen_occ->add_option("--prob", go_tocc.apply_probability, "train: occlusion probability");
  gen_occ->add_option("--alpha-min", go_tocc.alpha_min, "train: min occluded fraction");
  gen_occ->add_option("--alpha-max", go_tocc.alpha_max, "train: max occluded fraction");
  gen_occ->add_option("--side-min", go_tocc.side_min, "train: min occluder side (px)");
  int go_side_max = 256;
  gen_occ->add_option("--side-max", go_side_max, "max occluder side (px), both modes");
  gen_occ->add_option("--max-attempts", go_tocc.max_attempts, "train: rejection attempts");
  gen_occ->add_option("--target-lo", go_eocc.target_lo, "eval: window lower fraction");
  gen_occ->add_option("--target-hi", go_eocc.target_hi, "eval: window upper fraction");
  gen_occ->add_option("--max-rectangles", go_eocc.max_rectangles,
                      "eval: cap on rectangles per image (0 = uncapped)");

  // ---- train ----
  auto* train = app.add_subcommand("train", "run the two-stage curriculum");
  std::string tr_config, tr_out = "run";
  std::optional<int> tr_s1, tr_s2;
  std::optional<std::uint64_t> tr_seed;
  bool tr_quiet = false;
  train->add_option("--config", tr_config, "flat JSON config file");
  train->add_option("--out", tr_out, "run output directory");
  train->add_option("--stage1-steps", tr_s1, "override stage-1 step count");
  train->add_option("--stage2-steps", tr_s2, "override stage-2 step count");
  train->add_option("--seed", tr_seed, "override master seed");
  train->add_flag("--quiet", tr_quiet, "suppress progress lines");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on an OCC dataset");
  std::string ev_ckpt, ev_manifest, ev_report = "report.json";
  bool ev_bypass = false;
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint prefix (without .json/.bin)")->required();
  eval->add_option("--manifest", ev_manifest, "dataset annotations.json")->required();
  eval->add_option("--report", ev_report, "metrics report output path");
  eval->add_flag("--bypass-frm", ev_bypass, "disable feature reconstruction (baseline)");

  // ---- gradcam ----
  auto* gc = app.add_subcommand("gradcam", "export teacher/student attention heatmaps");
  std::string gc_ckpt, gc_manifest, gc_out = "heatmaps", gc_dump;
  int gc_id = 0;
  gc->add_option("--checkpoint", gc_ckpt, "checkpoint prefix")->required();
  gc->add_option("--manifest", gc_manifest, "dataset annotations.json")->required();
  gc->add_option("--image-id", gc_id, "image id to export")->required();
  gc->add_option("--out-dir", gc_out, "output directory");
  gc->add_option("--dump-pyramid", gc_dump, "also dump the student's completed pyramid");

  // ---- losscheck ----
  auto* lc = app.add_subcommand("losscheck", "run the finite-difference gradient suites");
  std::uint64_t lc_seed = 7;
  int lc_instances = 5;
  lc->add_option("--seed", lc_seed, "master seed");
  lc->add_option("--instances", lc_instances, "instances per suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_toy) {
      countocc::TrainConfig cfg = resolve_config("");
      if (gt_seed) cfg.seed = *gt_seed;
      if (gt_image) cfg.image_size = *gt_image;
      if (gt_cmin) cfg.count_min = *gt_cmin;
      if (gt_cmax) cfg.count_max = *gt_cmax;
      if (gt_vocab) cfg.vocab = *gt_vocab;
      countocc::gen_toy_dataset(cfg, gt_num, gt_out);
      std::fprintf(stderr, "wrote %d scenes to %s\n", gt_num, gt_out.c_str());
      return 0;
    }
    if (*gen_occ) {
      go_tocc.side_max = go_side_max;
      go_eocc.side_max = go_side_max;
      if (go_tocc.side_min > go_tocc.side_max) go_tocc.side_min = go_tocc.side_max;
      countocc::gen_occ_dataset(go_in, go_out, go_mode, go_seed, go_tocc, go_eocc);
      std::fprintf(stderr, "wrote occluded dataset to %s\n", go_out.c_str());
      return 0;
    }
    if (*train) {
      countocc::TrainConfig cfg = resolve_config(tr_config);
      if (tr_s1) cfg.stage1_steps = *tr_s1;
      if (tr_s2) cfg.stage2_steps = *tr_s2;
      if (tr_seed) cfg.seed = *tr_seed;
      countocc::TrainSummary s = countocc::run_training(cfg, tr_out, tr_quiet);
      std::fprintf(stderr,
                   "done: recon %.4f -> %.4f, mae(frm) %.3f, mae(bypass) %.3f, "
                   "attn l2 %.4f -> %.4f\n",
                   s.recon_val_step0, s.recon_val_stage1_end, s.mae_stage2, s.mae_stage2_bypass,
                   s.attn_l2_stage2_start, s.attn_l2_stage2_end);
      return 0;
    }
    if (*eval) {
      countocc::MetricsReport r =
          countocc::run_evaluation(ev_ckpt, ev_manifest, ev_report, ev_bypass);
      std::printf("mae %.6f rmse %.6f over %zu images (%zu errors)\n", r.mae, r.rmse, r.n_images,
                  r.errors.size());
      return r.clean() ? 0 : 1;
    }
    if (*gc) {
      countocc::run_gradcam_export(gc_ckpt, gc_manifest, gc_id, gc_out, gc_dump);
      std::fprintf(stderr, "wrote heatmaps for image %d to %s\n", gc_id, gc_out.c_str());
      return 0;
    }
    if (*lc) {
      std::vector<countocc::CheckResult> results;
      for (auto& r : countocc::check_frm_stage1_gradients(lc_seed, lc_instances))
        results.push_back(r);
      for (auto& r : countocc::check_viseq_map_gradients(lc_seed, lc_instances))
        results.push_back(r);
      for (auto& r : countocc::check_gradcam_dual_oracle(lc_seed, std::min(lc_instances, 3)))
        results.push_back(r);
      bool all_ok = true;
      for (const auto& r : results) {
        std::printf("[%s] %-28s err %.3e (tol %.1e)\n", r.passed() ? "PASS" : "FAIL",
                    r.name.c_str(), r.error, r.tolerance);
        all_ok = all_ok && r.passed();
      }
      return all_ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
