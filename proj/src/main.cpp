// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0
//
// nsmae — operator surface. Batch subcommands over the pre-training pipeline:
//   pretrain    run masked pre-training, write checkpoint/metrics/samples
//   render      reconstruct one scene from a checkpoint (qualitative study)
//   grad-check  compare pipeline gradients against central differences
//   eval        score a checkpoint on a scene pool under input masking
//   transfer    probe transfer quality: pretrained vs scratch mIoU rows
//
// Exit codes: 0 success; 1 a requested check failed its tolerance; 2 usage,
// configuration, or input errors (the offending key or path is named); 3
// training aborted on a non-finite loss. NSMAE_OUT overrides out.dir.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsmae/image_io.hpp"
#include "nsmae/trainer.hpp"

namespace {

using namespace nsmae;

/// Built-in defaults <- config file <- --set overrides <- NSMAE_OUT.
Config effective_config(const std::string& path, const std::vector<std::string>& sets) {
  Config cfg;
  if (!path.empty()) cfg.load_file(path);
  for (const std::string& s : sets) cfg.set(s);
  if (const char* env = std::getenv("NSMAE_OUT"); env != nullptr && *env != '\0')
    cfg.set("out.dir", env);
  return cfg;
}

std::string cell(bool present, double v) {
  if (!present) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Depth maps are stored on the unit axis (fraction of the ray's march span),
/// so the 16-bit range is used fully regardless of scene scale.
void write_unit_depth(const std::string& path, Tensor depth, double axis_length) {
  for (double& v : depth.data) v /= axis_length;
  write_pgm16(path, depth, 1.0 / 65535.0);
}

ParamStore load_params(const Config& cfg, const std::string& checkpoint_path) {
  ParamStore params = init_pipeline_params(cfg);
  apply_exact(params, load_checkpoint(checkpoint_path));
  return params;
}

Split split_from(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "probe-train") return Split::ProbeTrain;
  return Split::ProbeTest;
}

int cmd_pretrain(const Config& cfg, bool quiet) {
  const std::string out = cfg.text("out.dir");
  std::filesystem::create_directories(out);
  {
    std::ofstream used(out + "/config.used.cfg");
    used << cfg.describe();
  }
  const PretrainResult r = pretrain(cfg, out, quiet);
  std::printf("best validation total %.17g at epoch %" PRIu64 " (%s, %" PRId64 " steps)\n",
              r.epochs.back().best_val, r.best.meta.epoch,
              r.early_stopped ? "early-stopped" : "ran to completion", r.steps_run);
  std::printf("artifacts under %s: checkpoint.bin, metrics.csv, validation.csv, samples/\n",
              out.c_str());
  return 0;
}

int cmd_render(const Config& cfg, const std::string& ck_path, uint64_t seed, double ratio) {
  const ParamStore params = load_params(cfg, ck_path);
  FrameData frame = make_frame(seed, cfg);

  Graph g;
  const Bound b = bind_params(g, params);
  ForwardOptions fo;
  fo.use_mask = ratio > 0.0;
  fo.image_ratio = ratio;
  fo.voxel_ratio = 0.0;  // the rendering study corrupts the camera alone
  fo.image_seed = mix_seed(seed, 0xE0D, 0, 1);
  fo.want_loss =
      cfg.flag("loss.color") || cfg.flag("loss.depth_per") || cfg.flag("loss.depth_bev");
  fo.render_all = true;
  const ForwardResult r = forward_frame(g, b, frame, cfg, fo);

  const std::string out = cfg.text("out.dir");
  std::filesystem::create_directories(out);
  write_ppm(out + "/masked_input.ppm", r.masked_image);
  write_ppm(out + "/render_color.ppm", r.color);
  write_unit_depth(out + "/render_depth_per.pgm", r.depth_per, frame.rays_per.length());
  write_unit_depth(out + "/render_depth_bev.pgm", r.depth_bev, frame.rays_bev.length());
  write_ppm(out + "/gt_image.ppm", frame.image);
  write_ppm(out + "/gt_color.ppm", frame.per_targets.color);
  write_pgm16(out + "/gt_depth_per.pgm", frame.per_targets.depth, 1.0 / 65535.0);
  write_pgm16(out + "/gt_depth_bev.pgm", frame.bev_targets.depth, 1.0 / 65535.0);

  std::printf("scene seed %" PRIu64 ", image mask ratio %.17g\n", seed, ratio);
  if (r.has_loss) {
    const LossReport& rep = r.loss.report;
    if (rep.has_color)
      std::printf("color error      %.17g  (%" PRId64 " rays)\n", rep.raw_color, rep.rays_color);
    if (rep.has_depth_per)
      std::printf("depth_per error  %.17g  (%" PRId64 " rays)\n", rep.raw_depth_per,
                  rep.rays_depth_per);
    if (rep.has_depth_bev)
      std::printf("depth_bev error  %.17g  (%" PRId64 " rays)\n", rep.raw_depth_bev,
                  rep.rays_depth_bev);
    std::printf("weighted total   %.17g\n", rep.total);
  } else {
    std::printf("all loss terms disabled; no reconstruction summary\n");
  }
  std::printf("wrote masked_input, render_color, render_depth_per, render_depth_bev and gt_*"
              " under %s\n",
              out.c_str());
  return 0;
}

int cmd_grad_check(const Config& cfg, int64_t coords, double eps, double tolerance) {
  const GradCheckReport rep = pipeline_grad_check(cfg, coords, eps);
  std::printf("checked %" PRId64 " coordinates (%" PRId64 " per parameter tensor), eps %.3g\n",
              rep.n_checked, coords, eps);
  std::printf("max relative error %.6e at check %" PRId64 " (analytic %.17g, numeric %.17g)\n",
              rep.max_rel_err, rep.worst_coord, rep.analytic, rep.numeric);
  if (rep.max_rel_err <= tolerance) {
    std::printf("PASS: within tolerance %.3g\n", tolerance);
    return 0;
  }
  std::printf("FAIL: exceeds tolerance %.3g\n", tolerance);
  return 1;
}

int cmd_eval(const Config& cfg, const std::string& ck_path, const std::string& split,
             double image_ratio, double voxel_ratio, uint64_t mask_seed) {
  const ParamStore params = load_params(cfg, ck_path);
  const EvalSummary s =
      evaluate_masked(cfg, params, split_from(split), image_ratio, voxel_ratio, mask_seed);
  const LossReport& m = s.mean;
  std::printf(
      "split,frames,image_ratio,voxel_ratio,raw_color,raw_depth_per,raw_depth_bev,total,"
      "rays_color,rays_depth_per,rays_depth_bev\n");
  std::printf("%s,%" PRId64 ",%.17g,%.17g,%s,%s,%s,%.17g,%" PRId64 ",%" PRId64 ",%" PRId64 "\n",
              split.c_str(), s.frames, image_ratio, voxel_ratio,
              cell(m.has_color, m.raw_color).c_str(),
              cell(m.has_depth_per, m.raw_depth_per).c_str(),
              cell(m.has_depth_bev, m.raw_depth_bev).c_str(), m.total, m.rays_color,
              m.rays_depth_per, m.rays_depth_bev);
  return 0;
}

int cmd_transfer(const Config& cfg, const std::string& ck_path,
                 const std::vector<double>& fractions, const std::vector<uint64_t>& seeds) {
  const Checkpoint ck = load_checkpoint(ck_path);
  std::printf("fraction,seed,pretrained_miou,scratch_miou\n");
  for (const double f : fractions)
    for (const uint64_t s : seeds) {
      const ProbeResult r = transfer_probe(cfg, ck, f, s);
      std::printf("%.17g,%" PRIu64 ",%.17g,%.17g\n", f, s, r.pretrained, r.scratch);
      std::fflush(stdout);
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NeRF-supervised masked pre-training on synthetic scenes"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  const auto add_config_opts = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration file (omit for built-in defaults)");
    sub->add_option("--set", sets, "override one key, KEY=VALUE (repeatable)");
  };

  CLI::App* pre = app.add_subcommand("pretrain", "run masked pre-training and write artifacts");
  add_config_opts(pre);
  bool quiet = false;
  pre->add_flag("--quiet", quiet, "suppress the per-epoch progress line");

  CLI::App* ren = app.add_subcommand("render", "reconstruct one scene from a checkpoint");
  add_config_opts(ren);
  std::string ren_ck;
  ren->add_option("--checkpoint", ren_ck, "checkpoint to render from")->required();
  uint64_t ren_seed = 0;
  CLI::Option* ren_seed_opt =
      ren->add_option("--scene-seed", ren_seed, "scene seed (default: first validation scene)");
  double ren_ratio = 0.0;
  CLI::Option* ren_ratio_opt =
      ren->add_option("--mask-ratio", ren_ratio, "image mask ratio (default: mask.image_ratio)")
          ->check(CLI::Range(0.0, 1.0));

  CLI::App* gc =
      app.add_subcommand("grad-check", "compare pipeline gradients with central differences");
  add_config_opts(gc);
  int64_t gc_coords = 10;
  gc->add_option("--coords", gc_coords, "coordinates sampled per parameter tensor");
  double gc_eps = 1e-5;
  gc->add_option("--eps", gc_eps, "finite-difference step");
  double gc_tol = 1e-4;
  gc->add_option("--tolerance", gc_tol, "maximum relative error accepted");

  CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a scene pool under masking");
  add_config_opts(ev);
  std::string ev_ck;
  ev->add_option("--checkpoint", ev_ck, "checkpoint to score")->required();
  std::string ev_split = "val";
  ev->add_option("--split", ev_split, "scene pool to score")
      ->check(CLI::IsMember({"train", "val", "probe-train", "probe-test"}));
  double ev_img = 0.0;
  CLI::Option* ev_img_opt =
      ev->add_option("--image-ratio", ev_img, "image mask ratio (default: mask.image_ratio)")
          ->check(CLI::Range(0.0, 1.0));
  double ev_vox = 0.0;
  CLI::Option* ev_vox_opt =
      ev->add_option("--voxel-ratio", ev_vox, "voxel mask ratio (default: mask.voxel_ratio)")
          ->check(CLI::Range(0.0, 1.0));
  uint64_t ev_seed = 1;
  ev->add_option("--mask-seed", ev_seed, "seed for the evaluation masks");

  CLI::App* tr =
      app.add_subcommand("transfer", "probe transfer quality: pretrained vs scratch mIoU");
  add_config_opts(tr);
  std::string tr_ck;
  tr->add_option("--checkpoint", tr_ck, "checkpoint whose embedding is probed")->required();
  std::vector<double> tr_fracs{1.0};
  tr->add_option("--fraction", tr_fracs, "labeled fraction(s) of the probe pool (repeatable)");
  std::vector<uint64_t> tr_seeds{1};
  tr->add_option("--seed", tr_seeds, "probe seed(s) (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // 0 covers --help and --version style calls
  }

  const auto guarded = [](const std::function<int()>& body) -> int {
    try {
      return body();
    } catch (const std::invalid_argument& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 2;
    } catch (const std::runtime_error& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return std::string(e.what()).rfind("training aborted", 0) == 0 ? 3 : 2;
    }
  };

  if (pre->parsed())
    return guarded([&] { return cmd_pretrain(effective_config(config_path, sets), quiet); });
  if (ren->parsed())
    return guarded([&] {
      const Config cfg = effective_config(config_path, sets);
      const uint64_t seed =
          ren_seed_opt->count() > 0 ? ren_seed : scene_seed(cfg, Split::Val, 0);
      const double ratio =
          ren_ratio_opt->count() > 0 ? ren_ratio : cfg.number("mask.image_ratio");
      return cmd_render(cfg, ren_ck, seed, ratio);
    });
  if (gc->parsed())
    return guarded([&] {
      return cmd_grad_check(effective_config(config_path, sets), gc_coords, gc_eps, gc_tol);
    });
  if (ev->parsed())
    return guarded([&] {
      const Config cfg = effective_config(config_path, sets);
      const double img = ev_img_opt->count() > 0 ? ev_img : cfg.number("mask.image_ratio");
      const double vox = ev_vox_opt->count() > 0 ? ev_vox : cfg.number("mask.voxel_ratio");
      return cmd_eval(cfg, ev_ck, ev_split, img, vox, ev_seed);
    });
  return guarded([&] {
    return cmd_transfer(effective_config(config_path, sets), tr_ck, tr_fracs, tr_seeds);
  });
}
