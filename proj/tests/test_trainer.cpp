// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsmae/trainer.hpp"
#include "support/testers.hpp"

using namespace nsmae;
using nsmae::test::bits_equal;
using nsmae::test::expect_throw_contains;

namespace {

/// Shrunken-but-complete pipeline: 16x32 image (4x8 cells), 16x16x4 grid,
/// 4 scenes / 2 validation scenes, short ray marches. Every code path of the
/// full configuration is exercised at a fraction of the cost.
Config tiny() {
  Config cfg;
  cfg.set("scene.objects", "3");
  cfg.set("scene.train", "4");
  cfg.set("scene.val", "2");
  cfg.set("scene.probe_train", "2");
  cfg.set("scene.probe_test", "1");
  cfg.set("net.image_h", "16");
  cfg.set("net.image_w", "32");
  cfg.set("net.depth_bins", "4");
  cfg.set("net.cam_channels", "4");
  cfg.set("net.lidar_channels", "4");
  cfg.set("net.depth_max", "12.5");
  cfg.set("net.delta_per", "1");
  cfg.set("net.delta_bev", "0.5");
  cfg.set("grid.voxel", "1");
  cfg.set("lidar.azimuths", "24");
  cfg.set("lidar.elevations", "8");
  cfg.set("train.epochs", "3");
  cfg.set("train.batch", "2");
  cfg.set("probe.iterations", "2");
  return cfg;
}

struct DirGuard {
  std::string path;
  ~DirGuard() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int64_t count_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(bool(in));
  int64_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

GradTable grads_of(const Graph& g, const Bound& b, const ParamStore& ps) {
  GradTable table;
  for (const std::string& name : ps.names())
    if (g.has_grad(b.at(name))) table.emplace(name, g.grad(b.at(name)));
  return table;
}

}  // namespace

TEST_CASE("config translation builds validated module settings") {
  const Config cfg = tiny();
  const NetSpec spec = net_spec_from(cfg);
  CHECK(spec.image_h == 16);
  CHECK(spec.image_w == 32);
  CHECK(spec.grid_h() == 4);
  CHECK(spec.grid_w() == 8);
  CHECK(spec.nx == 16);
  CHECK(spec.ny == 16);
  CHECK(spec.nz == 4);
  CHECK(spec.voxel == 1.0);
  CHECK(spec.grid_range.lo.z() == 0.0);
  CHECK(spec.grid_range.hi.z() == 4.0);

  const LossWeights w = loss_weights_from(cfg);
  CHECK(w.lambda_color == 10000.0);
  CHECK(w.lambda_depth_per == 0.01);
  CHECK(w.p_color == 2.0);
  CHECK(w.p_depth == 1.0);

  const AdamWConfig a = adamw_config_from(cfg);
  CHECK(a.beta1 == 0.9);
  CHECK(a.beta2 == 0.999);
  CHECK(a.eps == 1e-8);
  CHECK(a.weight_decay == 0.01);

  Config bad = tiny();
  bad.set("grid.voxel", "3");
  expect_throw_contains<std::invalid_argument>([&] { net_spec_from(bad); },
                                               "grid.voxel must evenly divide");
  bad = tiny();
  bad.set("world.half_extent", "-1");
  expect_throw_contains<std::invalid_argument>([&] { net_spec_from(bad); },
                                               "world.half_extent must be > 0");
}

TEST_CASE("scene pools are sized by config and seeded disjointly") {
  const Config cfg = tiny();
  CHECK(split_size(cfg, Split::Train) == 4);
  CHECK(split_size(cfg, Split::Val) == 2);
  CHECK(split_size(cfg, Split::ProbeTrain) == 2);
  CHECK(split_size(cfg, Split::ProbeTest) == 1);

  std::set<uint64_t> seeds;
  for (const Split s : {Split::Train, Split::Val, Split::ProbeTrain, Split::ProbeTest})
    for (int64_t i = 0; i < split_size(cfg, s); ++i) seeds.insert(scene_seed(cfg, s, i));
  CHECK(seeds.size() == 9);  // 4 + 2 + 2 + 1, no collisions

  // mix_seed is order-sensitive in every argument.
  CHECK(mix_seed(1, 2, 3, 4) != mix_seed(4, 3, 2, 1));
  CHECK(mix_seed(1, 2, 3, 4) != mix_seed(1, 2, 3, 5));
  CHECK(mix_seed(1, 2, 3, 4) == mix_seed(1, 2, 3, 4));
}

TEST_CASE("make_frame is deterministic per seed and shaped by the spec") {
  const Config cfg = tiny();
  FrameData a = make_frame(scene_seed(cfg, Split::Train, 0), cfg);
  FrameData b = make_frame(scene_seed(cfg, Split::Train, 0), cfg);
  CHECK(bits_equal(a.image, b.image));
  CHECK(bits_equal(a.voxel_features, b.voxel_features));
  CHECK(bits_equal(a.per_targets.color, b.per_targets.color));
  CHECK(bits_equal(a.per_targets.depth, b.per_targets.depth));
  CHECK(bits_equal(a.per_targets.depth_valid, b.per_targets.depth_valid));
  CHECK(bits_equal(a.bev_targets.depth, b.bev_targets.depth));

  CHECK(a.image.shape == Shape{16, 32, 3});
  CHECK(a.voxel_features.shape == Shape{16, 16, 4, 2});
  CHECK(a.rays_per.rays() == 32);
  CHECK(a.rays_bev.rays() == 256);

  // Oracle depth targets live on the unit axis.
  for (const double d : a.per_targets.depth.data) CHECK((d >= 0.0 && d <= 1.0));
  for (const double d : a.bev_targets.depth.data) CHECK((d >= 0.0 && d <= 1.0));

  const FrameData other = make_frame(scene_seed(cfg, Split::Train, 1), cfg);
  CHECK(!(bits_equal(a.image, other.image) && bits_equal(a.voxel_features, other.voxel_features)));
}

TEST_CASE("forward_frame masks inputs, renders the asked heads, and fills the report") {
  const Config cfg = tiny();
  const ParamStore ps = init_pipeline_params(cfg);
  FrameData frame = make_frame(scene_seed(cfg, Split::Train, 0), cfg);

  SUBCASE("defaults: all targets scored against a masked input") {
    Graph g;
    const Bound b = bind_params(g, ps);
    const ForwardResult r = forward_frame(g, b, frame, cfg, ForwardOptions{});
    CHECK(r.has_loss);
    CHECK(r.loss.report.has_color);
    CHECK(r.loss.report.has_depth_per);
    CHECK(r.loss.report.has_depth_bev);
    CHECK(std::isfinite(r.loss.report.total));
    CHECK(r.loss.report.total > 0.0);
    CHECK(r.loss.report.rays_color == 32);  // every cell scored
    CHECK(r.color.shape == Shape{4, 8, 3});
    CHECK(r.depth_per.shape == Shape{4, 8});
    CHECK(r.depth_bev.shape == Shape{16, 16});

    CHECK(!bits_equal(r.masked_image, frame.image));
    CHECK(r.image_mask.shape == Shape{16, 32});
    int64_t masked = 0;
    for (const double m : r.image_mask.data) {
      CHECK((m == 0.0 || m == 1.0));
      masked += m == 1.0;
    }
    CHECK(masked == 256);  // round(0.5 * 32 cells) * 4*4 pixels
  }

  SUBCASE("use_mask off feeds the clean image and reports no mask") {
    Graph g;
    const Bound b = bind_params(g, ps);
    ForwardOptions fo;
    fo.use_mask = false;
    const ForwardResult r = forward_frame(g, b, frame, cfg, fo);
    CHECK(bits_equal(r.masked_image, frame.image));
    CHECK(r.image_mask.data.empty());
  }

  SUBCASE("want_loss off still renders the enabled heads") {
    Graph g;
    const Bound b = bind_params(g, ps);
    ForwardOptions fo;
    fo.want_loss = false;
    const ForwardResult r = forward_frame(g, b, frame, cfg, fo);
    CHECK(!r.has_loss);
    CHECK(r.color.shape == Shape{4, 8, 3});
    CHECK(r.depth_bev.shape == Shape{16, 16});
  }

  SUBCASE("loss toggles drop terms and heads") {
    Config c = tiny();
    c.set("loss.color", "off");
    c.set("loss.depth_per", "off");
    Graph g;
    const Bound b = bind_params(g, ps);
    const ForwardResult r = forward_frame(g, b, frame, c, ForwardOptions{});
    CHECK(!r.loss.report.has_color);
    CHECK(!r.loss.report.has_depth_per);
    CHECK(r.loss.report.has_depth_bev);
    CHECK(r.color.data.empty());      // perspective head skipped entirely
    CHECK(r.depth_per.data.empty());
    CHECK(r.depth_bev.shape == Shape{16, 16});
    CHECK(r.loss.report.total == doctest::Approx(r.loss.report.weighted_depth_bev).epsilon(1e-15));
  }

  SUBCASE("all targets off is rejected unless no loss is wanted") {
    Config c = tiny();
    c.set("loss.color", "off");
    c.set("loss.depth_per", "off");
    c.set("loss.depth_bev", "off");
    Graph g;
    const Bound b = bind_params(g, ps);
    expect_throw_contains<std::invalid_argument>(
        [&] { forward_frame(g, b, frame, c, ForwardOptions{}); }, "enable at least one");
    ForwardOptions fo;
    fo.want_loss = false;
    fo.render_all = true;
    const ForwardResult r = forward_frame(g, b, frame, c, fo);
    CHECK(!r.has_loss);
    CHECK(r.color.shape == Shape{4, 8, 3});
    CHECK(r.depth_per.shape == Shape{4, 8});
    CHECK(r.depth_bev.shape == Shape{16, 16});
  }

  SUBCASE("mask patch must match the cell size") {
    Config c = tiny();
    c.set("mask.patch", "2");
    Graph g;
    const Bound b = bind_params(g, ps);
    expect_throw_contains<std::invalid_argument>(
        [&] { forward_frame(g, b, frame, c, ForwardOptions{}); },
        "mask.patch must equal net.kappa");
  }

  SUBCASE("loss.on_masked_only restricts scoring to fully-masked cells") {
    Config c = tiny();
    c.set("loss.on_masked_only", "on");
    Graph g;
    const Bound b = bind_params(g, ps);
    const ForwardResult r = forward_frame(g, b, frame, c, ForwardOptions{});
    CHECK(r.loss.report.rays_color == 16);  // round(0.5 * 32) masked cells
    CHECK(r.loss.report.rays_depth_per <= 16);

    // Without an image mask there is no masked set; every ray is scored.
    ForwardOptions fo;
    fo.use_mask = false;
    Graph g2;
    const Bound b2 = bind_params(g2, ps);
    const ForwardResult r2 = forward_frame(g2, b2, frame, c, fo);
    CHECK(r2.loss.report.rays_color == 32);
  }
}

TEST_CASE("an lr = 0 optimizer step leaves every parameter bit-identical") {
  const Config cfg = tiny();
  ParamStore ps = init_pipeline_params(cfg);
  CHECK(ps.count() == 21);
  FrameData frame = make_frame(scene_seed(cfg, Split::Train, 0), cfg);

  Graph g;
  const Bound b = bind_params(g, ps);
  const ForwardResult r = forward_frame(g, b, frame, cfg, ForwardOptions{});
  g.backward(r.loss.value);
  const GradTable grads = grads_of(g, b, ps);
  CHECK(grads.size() == ps.count());  // every parameter is on the loss path

  const ParamStore before = ps;
  AdamW opt(ps, adamw_config_from(cfg));
  opt.step(ps, grads, 0.0);
  CHECK(opt.step_count() == 1);
  for (const std::string& name : ps.names()) {
    INFO("parameter " << name);
    CHECK(bits_equal(ps.at(name), before.at(name)));
  }
}

TEST_CASE("pretrain runs deterministically and writes its artifacts") {
  const Config cfg = tiny();
  DirGuard dir_a{"trainer_test_out_a"};
  DirGuard dir_b{"trainer_test_out_b"};
  const PretrainResult a = pretrain(cfg, dir_a.path, /*quiet=*/true);
  const PretrainResult b = pretrain(cfg, dir_b.path, /*quiet=*/true);

  // 4 scenes / batch 2 -> 2 steps per epoch, 3 epochs.
  CHECK(a.steps_run == 6);
  CHECK(a.step_totals.size() == 6);
  CHECK(a.epochs.size() == 3);
  CHECK(!a.early_stopped);
  for (size_t i = 0; i < a.epochs.size(); ++i) {
    CHECK(a.epochs[i].epoch == static_cast<int64_t>(i) + 1);
    CHECK(std::isfinite(a.epochs[i].val.total));
    CHECK(a.epochs[i].val.total > 0.0);
  }

  // best_val is the running minimum of the validation totals.
  double running = std::numeric_limits<double>::infinity();
  for (const EpochStats& e : a.epochs) {
    running = std::min(running, e.val.total);
    CHECK(e.best_val == running);
  }

  // Same config, fresh run: bit-identical trajectory and checkpoint.
  REQUIRE(b.step_totals.size() == a.step_totals.size());
  for (size_t i = 0; i < a.step_totals.size(); ++i) CHECK(a.step_totals[i] == b.step_totals[i]);
  for (size_t i = 0; i < a.epochs.size(); ++i) CHECK(a.epochs[i].val.total == b.epochs[i].val.total);
  CHECK(slurp(dir_a.path + "/checkpoint.bin") == slurp(dir_b.path + "/checkpoint.bin"));

  // Logs: header + 6 step rows; header + 3 epoch rows.
  CHECK(count_lines(dir_a.path + "/metrics.csv") == 7);
  CHECK(count_lines(dir_a.path + "/validation.csv") == 4);
  for (const char* name :
       {"samples/gt_image.ppm", "samples/gt_color.ppm", "samples/gt_depth_per.pgm",
        "samples/gt_depth_bev.pgm", "samples/epoch_001_masked.ppm", "samples/epoch_001_color.ppm",
        "samples/epoch_001_depth_per.pgm", "samples/epoch_001_depth_bev.pgm",
        "samples/epoch_003_color.ppm"}) {
    INFO("artifact " << name);
    CHECK(std::filesystem::exists(dir_a.path + "/" + name));
  }

  // The stored checkpoint is the in-memory best and re-applies cleanly.
  const Checkpoint ck = load_checkpoint(dir_a.path + "/checkpoint.bin");
  CHECK(ck.meta.step == 6);
  CHECK(ck.meta.epoch >= 1);
  CHECK(ck.meta.epoch <= 3);
  CHECK(ck.meta.config_hash == cfg.fingerprint());
  CHECK(ck.meta.rng_state == b.best.meta.rng_state);
  ParamStore fresh = init_pipeline_params(cfg);
  apply_exact(fresh, ck);
  for (const std::string& name : fresh.names()) {
    INFO("parameter " << name);
    CHECK(bits_equal(fresh.at(name), a.best.params.at(name)));
  }
}

TEST_CASE("early stopping trips after patience epochs without improvement") {
  // A vanishing learning rate freezes the model in effect: validation under
  // fixed masks repeats bitwise, so epoch 1 stays best and patience runs out.
  Config cfg = tiny();
  cfg.set("scene.train", "2");
  cfg.set("scene.val", "1");
  cfg.set("train.epochs", "10");
  cfg.set("train.patience", "2");
  cfg.set("train.max_lr", "1e-300");
  DirGuard dir{"trainer_test_out_stop"};
  const PretrainResult r = pretrain(cfg, dir.path, /*quiet=*/true);
  CHECK(r.early_stopped);
  CHECK(r.epochs.size() == 3);  // best at 1, then `patience` flat epochs
  CHECK(r.steps_run == 3);
  CHECK(r.best.meta.epoch == 1);
  CHECK(r.epochs[1].val.total == r.epochs[0].val.total);
  CHECK(r.epochs[2].val.total == r.epochs[0].val.total);
}

TEST_CASE("evaluate_masked scores a frozen model reproducibly") {
  const Config cfg = tiny();
  const ParamStore ps = init_pipeline_params(cfg);
  const EvalSummary masked = evaluate_masked(cfg, ps, Split::Val, 0.5, 0.9, 77);
  CHECK(masked.frames == 2);
  CHECK(masked.mean.has_color);
  CHECK(masked.mean.has_depth_per);
  CHECK(masked.mean.has_depth_bev);
  CHECK(std::isfinite(masked.mean.total));
  CHECK(masked.mean.rays_color == 64);  // 32 cells over 2 frames

  const EvalSummary again = evaluate_masked(cfg, ps, Split::Val, 0.5, 0.9, 77);
  CHECK(again.mean.total == masked.mean.total);

  const EvalSummary clean = evaluate_masked(cfg, ps, Split::Val, 0.0, 0.0, 77);
  CHECK(clean.mean.rays_color == 64);
  CHECK(clean.mean.total != masked.mean.total);  // corruption changes the input

  Config empty = tiny();
  empty.set("scene.probe_test", "0");
  expect_throw_contains<std::runtime_error>(
      [&] { evaluate_masked(empty, ps, Split::ProbeTest, 0.5, 0.9, 1); }, "eval split is empty");
}

TEST_CASE("miou_binary counts both classes like a confusion matrix") {
  CHECK(miou_binary({1, 0, 1, 0}, {1, 0, 1, 0}) == 1.0);
  CHECK(miou_binary({1, 1}, {0, 0}) == 0.0);
  // tp=1 fp=1 fn=1 tn=1: IoU is 1/3 for each class.
  CHECK(miou_binary({1, 0, 1, 0}, {1, 1, 0, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // A class missing from both sides scores a perfect 1.
  CHECK(miou_binary({0, 0}, {0, 0}) == 1.0);
  CHECK(miou_binary({1, 1}, {1, 1}) == 1.0);
  expect_throw_contains<std::invalid_argument>([] { miou_binary({1}, {1, 0}); },
                                               "size mismatch");
}

TEST_CASE("transfer probe arms are deterministic and validated") {
  const Config cfg = tiny();
  const double scratch = run_probe_arm(cfg, nullptr, 1.0, 5);
  CHECK(scratch >= 0.0);
  CHECK(scratch <= 1.0);
  CHECK(run_probe_arm(cfg, nullptr, 1.0, 5) == scratch);

  // Half the pool still trains (rounds to one labeled scene here).
  const double half = run_probe_arm(cfg, nullptr, 0.5, 5);
  CHECK(half >= 0.0);
  CHECK(half <= 1.0);

  expect_throw_contains<std::invalid_argument>([&] { run_probe_arm(cfg, nullptr, 0.0, 5); },
                                               "label_fraction must be in (0, 1]");
  expect_throw_contains<std::invalid_argument>([&] { run_probe_arm(cfg, nullptr, 1.5, 5); },
                                               "label_fraction must be in (0, 1]");
  Config bad = tiny();
  bad.set("probe.iterations", "0");
  expect_throw_contains<std::invalid_argument>([&] { run_probe_arm(bad, nullptr, 1.0, 5); },
                                               "probe.iterations must be >= 1");

  // Warm-starting from a checkpoint reuses its embedding; the scratch arm of
  // the pair matches the standalone scratch run under the same seed.
  Checkpoint ck;
  ck.params = init_pipeline_params(cfg);
  const ProbeResult pr = transfer_probe(cfg, ck, 1.0, 5);
  CHECK(pr.scratch == scratch);
  CHECK(pr.pretrained >= 0.0);
  CHECK(pr.pretrained <= 1.0);
}

TEST_CASE("pipeline gradients match central differences end to end") {
  const Config cfg = tiny();
  const GradCheckReport rep = pipeline_grad_check(cfg, 1, 1e-5);
  CHECK(rep.n_checked == 21);  // one coordinate per parameter tensor
  INFO("worst check " << rep.worst_coord << " analytic " << rep.analytic << " numeric "
                      << rep.numeric);
  CHECK(rep.max_rel_err <= 1e-4);
}
