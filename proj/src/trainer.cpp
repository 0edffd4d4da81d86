// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "nsmae/image_io.hpp"
#include "nsmae/masking.hpp"
#include "nsmae/rng.hpp"

namespace nsmae {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Field-wise mean over per-frame reports (ray counts are summed).
LossReport mean_report(const std::vector<LossReport>& reports) {
  LossReport m;
  if (reports.empty()) return m;
  for (const LossReport& r : reports) {
    m.has_color = m.has_color || r.has_color;
    m.has_depth_per = m.has_depth_per || r.has_depth_per;
    m.has_depth_bev = m.has_depth_bev || r.has_depth_bev;
    m.raw_color += r.raw_color;
    m.raw_depth_per += r.raw_depth_per;
    m.raw_depth_bev += r.raw_depth_bev;
    m.weighted_color += r.weighted_color;
    m.weighted_depth_per += r.weighted_depth_per;
    m.weighted_depth_bev += r.weighted_depth_bev;
    m.total += r.total;
    m.rays_color += r.rays_color;
    m.rays_depth_per += r.rays_depth_per;
    m.rays_depth_bev += r.rays_depth_bev;
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  m.raw_color *= inv;
  m.raw_depth_per *= inv;
  m.raw_depth_bev *= inv;
  m.weighted_color *= inv;
  m.weighted_depth_per *= inv;
  m.weighted_depth_bev *= inv;
  m.total *= inv;
  return m;
}

/// [H/k, W/k] cell indicator: 1 where every pixel of the cell is masked.
Tensor fully_masked_cells(const Tensor& pixel_mask, const NetSpec& spec) {
  const int64_t gh = spec.grid_h(), gw = spec.grid_w();
  const int64_t k = spec.kappa;
  Tensor cells = Tensor::zeros({gh, gw});
  for (int64_t v = 0; v < gh; ++v)
    for (int64_t u = 0; u < gw; ++u) {
      double all = 1.0;
      for (int64_t dy = 0; dy < k && all == 1.0; ++dy)
        for (int64_t dx = 0; dx < k; ++dx)
          if (pixel_mask.at({v * k + dy, u * k + dx}) != 1.0) {
            all = 0.0;
            break;
          }
      cells.at({v, u}) = all;
    }
  return cells;
}

/// Sum the graph's parameter gradients for one frame into `acc`, walking the
/// store's insertion order so the accumulation order is reproducible.
void accumulate_grads(GradTable& acc, const Graph& g, const Bound& b, const ParamStore& params) {
  for (const std::string& name : params.names()) {
    const Var v = b.at(name);
    if (!g.has_grad(v)) continue;
    const Tensor& grad = g.grad(v);
    const auto it = acc.find(name);
    if (it == acc.end()) {
      acc.emplace(name, grad);
    } else {
      Tensor& t = it->second;
      for (int64_t i = 0; i < t.numel(); ++i) t[i] += grad[i];
    }
  }
}

/// Embedding of one unmasked frame pushed through the linear probe head:
/// one occupancy logit per BEV (x, y) column.
Var probe_logits(Graph& g, const Bound& b, FrameData& frame, const NetSpec& spec,
                 const GridMeta& meta) {
  PerspectiveEmbedding pe = encode_camera(b, g.constant(frame.image), spec);
  if (!frame.routing) frame.routing = lift_routing(frame.rig, pe, meta);
  Var cam_bev = cam2world_lift_splat(pe, frame.routing, meta);
  Var lidar_bev = encode_lidar(b, g.constant(frame.voxel_features), spec);
  Var fused = fuse(cam_bev, lidar_bev);  // [X, Y, Z, C_I + C_L]
  const int64_t cols = meta.nx * meta.ny;
  const int64_t width = meta.nz * (spec.ctx_channels + spec.lidar_channels);
  Var flat = reshape(fused, {cols, width});
  Var z = affine(flat, b.at("probe.weight"), b.at("probe.bias"));
  return reshape(z, {cols});
}

}  // namespace

// ---- config -> module settings ----------------------------------------

NetSpec net_spec_from(const Config& cfg) {
  NetSpec s;
  s.image_h = static_cast<int>(cfg.integer("net.image_h"));
  s.image_w = static_cast<int>(cfg.integer("net.image_w"));
  s.kappa = static_cast<int>(cfg.integer("net.kappa"));
  s.depth_bins = static_cast<int>(cfg.integer("net.depth_bins"));
  s.ctx_channels = static_cast<int>(cfg.integer("net.cam_channels"));
  s.lidar_channels = static_cast<int>(cfg.integer("net.lidar_channels"));
  s.depth_min = cfg.number("net.depth_min");
  s.depth_max = cfg.number("net.depth_max");
  s.delta_per = cfg.number("net.delta_per");
  s.delta_bev = cfg.number("net.delta_bev");

  const double he = cfg.number("world.half_extent");
  const double hz = cfg.number("world.height");
  const double v = cfg.number("grid.voxel");
  if (!(he > 0.0)) throw std::invalid_argument("world.half_extent must be > 0");
  if (!(hz > 0.0)) throw std::invalid_argument("world.height must be > 0");
  if (!(v > 0.0)) throw std::invalid_argument("grid.voxel must be > 0");
  s.grid_range = Aabb{Vec3(-he, -he, 0.0), Vec3(he, he, hz)};
  s.voxel = v;
  s.nx = static_cast<int64_t>(std::llround(2.0 * he / v));
  s.ny = s.nx;
  s.nz = static_cast<int64_t>(std::llround(hz / v));
  if (std::abs(static_cast<double>(s.nx) * v - 2.0 * he) > 1e-9 ||
      std::abs(static_cast<double>(s.nz) * v - hz) > 1e-9)
    throw std::invalid_argument("grid.voxel must evenly divide 2*world.half_extent and world.height");
  s.validate();
  return s;
}

LossWeights loss_weights_from(const Config& cfg) {
  LossWeights w;
  w.lambda_color = cfg.number("loss.lambda_color");
  w.lambda_depth_per = cfg.number("loss.lambda_depth_per");
  w.lambda_depth_bev = cfg.number("loss.lambda_depth_bev");
  w.p_color = cfg.number("loss.p_color");
  w.p_depth = cfg.number("loss.p_depth");
  w.validate();
  return w;
}

Aabb world_bounds_from(const Config& cfg) { return net_spec_from(cfg).grid_range; }

AdamWConfig adamw_config_from(const Config& cfg) {
  AdamWConfig c;
  c.beta1 = cfg.number("train.beta1");
  c.beta2 = cfg.number("train.beta2");
  c.eps = cfg.number("train.eps");
  c.weight_decay = cfg.number("train.weight_decay");
  return c;
}

// ---- scene pools -------------------------------------------------------

int64_t split_size(const Config& cfg, Split split) {
  switch (split) {
    case Split::Train:
      return cfg.integer("scene.train");
    case Split::Val:
      return cfg.integer("scene.val");
    case Split::ProbeTrain:
      return cfg.integer("scene.probe_train");
    case Split::ProbeTest:
      return cfg.integer("scene.probe_test");
  }
  throw std::invalid_argument("unknown split");
}

uint64_t scene_seed(const Config& cfg, Split split, int64_t index) {
  uint64_t offset = 0;
  switch (split) {
    case Split::Train:
      offset = 0;
      break;
    case Split::Val:
      offset = 10000;
      break;
    case Split::ProbeTrain:
      offset = 20000;
      break;
    case Split::ProbeTest:
      offset = 30000;
      break;
  }
  return static_cast<uint64_t>(cfg.integer("scene.seed")) + offset + static_cast<uint64_t>(index);
}

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  uint64_t h = 0x9e3779b97f4a7c15ull ^ a;
  h = Rng(h ^ (b * 0xbf58476d1ce4e5b9ull)).next_u64();
  h = Rng(h ^ (c * 0x94d049bb133111ebull)).next_u64();
  h = Rng(h ^ (d * 0x2545f4914f6cdd1dull)).next_u64();
  return h;
}

// ---- frame assembly ----------------------------------------------------

FrameData make_frame(uint64_t seed, const Config& cfg) {
  const NetSpec spec = net_spec_from(cfg);
  const Aabb world = world_bounds_from(cfg);
  const Scene scene =
      generate_scene(seed, static_cast<int>(cfg.integer("scene.objects")), world);

  const double he = cfg.number("world.half_extent");
  const double hz = cfg.number("world.height");
  Rng rig_rng(mix_seed(seed, 0xCA11, 0, 0));
  const double angle = rig_rng.uniform(0.0, 2.0 * std::numbers::pi);
  const Vec3 eye(0.8 * he * std::cos(angle), 0.8 * he * std::sin(angle), 0.5 * hz);
  const Vec3 look_at(0.0, 0.0, 0.2 * hz);

  FrameData f;
  f.rig = make_look_at_rig(eye, look_at, cfg.number("camera.focal"), spec.image_h, spec.image_w);
  f.image = render_gt_image(scene, f.rig).image;

  const Vec3 lidar_eye(0.0, 0.0, 0.625 * hz);
  const std::vector<PointXYZR> cloud =
      simulate_lidar(scene, lidar_eye, static_cast<int>(cfg.integer("lidar.azimuths")),
                     static_cast<int>(cfg.integer("lidar.elevations")));
  const VoxelGrid grid =
      voxelize(cloud, spec.grid_range, Vec3(spec.voxel, spec.voxel, spec.voxel));
  f.voxel_features = grid.features();

  f.rays_per = build_rays_perspective(f.rig, spec);
  f.rays_bev = build_rays_bev(grid_meta(spec), spec.delta_bev);
  f.per_targets = perspective_targets(scene, f.rays_per, spec);
  f.bev_targets = bev_targets(grid);
  return f;
}

// ---- forward pass ------------------------------------------------------

ForwardResult forward_frame(Graph& g, const Bound& p, FrameData& frame, const Config& cfg,
                            const ForwardOptions& opt) {
  const NetSpec spec = net_spec_from(cfg);
  const GridMeta meta = grid_meta(spec);
  const LossWeights weights = loss_weights_from(cfg);
  const bool want_color = cfg.flag("loss.color");
  const bool want_dper = cfg.flag("loss.depth_per");
  const bool want_dbev = cfg.flag("loss.depth_bev");
  const bool masked_only = cfg.flag("loss.on_masked_only");
  if (opt.want_loss && !(want_color || want_dper || want_dbev))
    throw std::invalid_argument(
        "loss.color, loss.depth_per and loss.depth_bev are all off; enable at least one");

  ForwardResult out;

  // Camera branch — always runs: the lifted camera embedding feeds the fused
  // BEV volume even when both camera-view losses are off.
  const bool mask_img = opt.use_mask && opt.image_ratio > 0.0;
  Var image_in;
  if (mask_img) {
    ImageMaskSpec ms;
    ms.patch_size = static_cast<int>(cfg.integer("mask.patch"));
    ms.ratio = opt.image_ratio;
    ms.seed = opt.image_seed;
    if (ms.patch_size != spec.kappa)
      throw std::invalid_argument("mask.patch must equal net.kappa: the mask token is kappa-sized");
    MaskedImage mi = mask_image(g.constant(frame.image), ms, p.at("mask.token"));
    image_in = mi.image;
    out.image_mask = mi.mask;
    out.masked_image = image_in.value();
  } else {
    image_in = g.constant(frame.image);
    out.masked_image = frame.image;
  }
  PerspectiveEmbedding pe = encode_camera(p, image_in, spec);
  if (!frame.routing) frame.routing = lift_routing(frame.rig, pe, meta);

  // Ray-support masks for the camera-view losses. With an image mask present
  // and loss.on_masked_only set, only cells whose every pixel is masked are
  // scored (reconstruction of what the encoder never saw).
  Tensor color_mask = Tensor::full({spec.grid_h(), spec.grid_w()}, 1.0);
  Tensor per_depth_mask = frame.per_targets.depth_valid;
  if (masked_only && mask_img) {
    const Tensor cells = fully_masked_cells(out.image_mask, spec);
    for (int64_t i = 0; i < cells.numel(); ++i) {
      color_mask[i] = cells[i];
      per_depth_mask[i] *= cells[i];
    }
  }

  std::optional<RayLoss> l_color, l_dper, l_dbev;
  if (want_color || want_dper || opt.render_all) {
    const FeatureVolume fv = render_head(p, pe.feature, View::PER, spec);
    if (want_color || opt.render_all) {
      RenderedMap cm = render_view(fv, frame.rays_per, Target::Color);
      out.color = cm.value.value();
      if (opt.want_loss && want_color)
        l_color = lp_loss(cm.value, frame.per_targets.color, color_mask, weights.p_color);
    }
    if (want_dper || opt.render_all) {
      RenderedMap dm = render_view(fv, frame.rays_per, Target::Depth);
      out.depth_per = dm.value.value();
      if (opt.want_loss && want_dper) {
        Var unit = normalize_rendered_depth(dm, frame.rays_per);
        l_dper = lp_loss(unit, frame.per_targets.depth, per_depth_mask, weights.p_depth);
      }
    }
  }

  if (want_dbev || opt.render_all) {
    Tensor vox = frame.voxel_features;
    if (opt.use_mask && opt.voxel_ratio > 0.0)
      vox = mask_voxels(frame.voxel_features, opt.voxel_ratio, opt.voxel_seed).features;
    Var lidar_bev = encode_lidar(p, g.constant(std::move(vox)), spec);
    Var cam_bev = cam2world_lift_splat(pe, frame.routing, meta);
    Var fused = fuse(cam_bev, lidar_bev);
    const FeatureVolume bv = render_head(p, fused, View::BEV, spec);
    RenderedMap bm = render_view(bv, frame.rays_bev, Target::Depth);
    out.depth_bev = bm.value.value();
    if (opt.want_loss && want_dbev) {
      Var unit = normalize_rendered_depth(bm, frame.rays_bev);
      l_dbev = lp_loss(unit, frame.bev_targets.depth, frame.bev_targets.depth_valid,
                       weights.p_depth);
    }
  }

  if (opt.want_loss) {
    out.loss = total_loss(l_color, l_dper, l_dbev, weights);
    out.has_loss = true;
  }
  return out;
}

ParamStore init_pipeline_params(const Config& cfg) {
  const NetSpec spec = net_spec_from(cfg);
  const uint64_t seed = static_cast<uint64_t>(cfg.integer("train.seed"));
  ParamStore ps;
  init_embed_params(ps, spec, seed);
  init_render_params(ps, spec, seed);
  return ps;
}

GradCheckReport pipeline_grad_check(const Config& cfg, int64_t coords_per_param, double eps) {
  if (coords_per_param < 1)
    throw std::invalid_argument("pipeline_grad_check: coords_per_param must be >= 1");
  FrameData frame = make_frame(scene_seed(cfg, Split::Train, 0), cfg);
  ParamStore params = init_pipeline_params(cfg);
  const std::vector<std::string> names = params.names();

  std::vector<Tensor> points;
  points.reserve(names.size());
  for (const std::string& name : names) points.push_back(params.at(name));

  const uint64_t seed = static_cast<uint64_t>(cfg.integer("train.seed"));
  Rng rng(mix_seed(seed, 0x6C0, 0, 0));
  std::vector<ParamCoord> coords;
  for (size_t pi = 0; pi < points.size(); ++pi) {
    const int64_t n = points[pi].numel();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    rng.shuffle(idx);
    const int64_t k = std::min<int64_t>(coords_per_param, n);
    for (int64_t j = 0; j < k; ++j) coords.push_back({pi, idx[static_cast<size_t>(j)]});
  }

  ForwardOptions fo;
  fo.use_mask = cfg.flag("mask.enabled");
  fo.image_ratio = cfg.number("mask.image_ratio");
  fo.voxel_ratio = cfg.number("mask.voxel_ratio");
  fo.image_seed = mix_seed(seed, 0x6C1, 0, 1);
  fo.voxel_seed = mix_seed(seed, 0x6C1, 0, 2);

  const auto build = [&](Graph& g, const std::vector<Var>& leaves) -> Var {
    Bound b;
    for (size_t i = 0; i < names.size(); ++i) b.vars.emplace(names[i], leaves[i]);
    return forward_frame(g, b, frame, cfg, fo).loss.value;
  };
  return grad_check_many(build, points, eps, coords);
}

// ---- pre-training ------------------------------------------------------

PretrainResult pretrain(const Config& cfg, const std::string& out_dir, bool quiet) {
  const NetSpec spec = net_spec_from(cfg);
  loss_weights_from(cfg);  // validate early
  const int64_t epochs = cfg.integer("train.epochs");
  const int64_t batch = cfg.integer("train.batch");
  const int64_t patience = cfg.integer("train.patience");
  const double max_lr = cfg.number("train.max_lr");
  const double clip_norm = cfg.number("train.clip_norm");
  const int64_t n_train = split_size(cfg, Split::Train);
  const int64_t n_val = split_size(cfg, Split::Val);
  if (epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
  if (batch < 1) throw std::invalid_argument("train.batch must be >= 1");
  if (patience < 1) throw std::invalid_argument("train.patience must be >= 1");
  if (n_train < 1) throw std::invalid_argument("scene.train must be >= 1");
  if (n_val < 1) throw std::invalid_argument("scene.val must be >= 1");
  if (!(cfg.flag("loss.color") || cfg.flag("loss.depth_per") || cfg.flag("loss.depth_bev")))
    throw std::invalid_argument(
        "loss.color, loss.depth_per and loss.depth_bev are all off; enable at least one");

  std::filesystem::create_directories(out_dir + "/samples");

  std::vector<FrameData> train_frames, val_frames;
  train_frames.reserve(static_cast<size_t>(n_train));
  val_frames.reserve(static_cast<size_t>(n_val));
  for (int64_t i = 0; i < n_train; ++i)
    train_frames.push_back(make_frame(scene_seed(cfg, Split::Train, i), cfg));
  for (int64_t i = 0; i < n_val; ++i)
    val_frames.push_back(make_frame(scene_seed(cfg, Split::Val, i), cfg));

  ParamStore params = init_pipeline_params(cfg);
  AdamW optimizer(params, adamw_config_from(cfg));

  const uint64_t seed = static_cast<uint64_t>(cfg.integer("train.seed"));
  const bool use_mask = cfg.flag("mask.enabled");
  const double image_ratio = cfg.number("mask.image_ratio");
  const double voxel_ratio = cfg.number("mask.voxel_ratio");
  const int64_t steps_per_epoch = (n_train + batch - 1) / batch;
  const int64_t total_steps = epochs * steps_per_epoch;

  std::ofstream metrics(out_dir + "/metrics.csv");
  std::ofstream validation(out_dir + "/validation.csv");
  if (!metrics || !validation)
    throw std::runtime_error("cannot open metrics files under " + out_dir);
  metrics << LossReport::csv_header() << "\n";
  validation << "epoch,raw_color,raw_depth_per,raw_depth_bev,total,best_total\n";

  // Ground-truth artifacts for the sampled validation frame, written once.
  {
    const FrameData& f0 = val_frames[0];
    write_ppm(out_dir + "/samples/gt_image.ppm", f0.image);
    write_ppm(out_dir + "/samples/gt_color.ppm", f0.per_targets.color);
    write_pgm16(out_dir + "/samples/gt_depth_per.pgm", f0.per_targets.depth, 1.0 / 65535.0);
    write_pgm16(out_dir + "/samples/gt_depth_bev.pgm", f0.bev_targets.depth, 1.0 / 65535.0);
  }

  PretrainResult result;
  Rng shuffle_rng(mix_seed(seed, 0x5F0, 0, 0));
  std::vector<int64_t> order(static_cast<size_t>(n_train));
  for (int64_t i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;

  double best_val = std::numeric_limits<double>::infinity();
  ParamStore best_params = params;
  int64_t best_epoch = 0;
  int64_t bad_epochs = 0;
  int64_t global_step = 0;

  for (int64_t epoch = 1; epoch <= epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_total = 0.0;

    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const double lr = one_cycle_lr(global_step, total_steps, max_lr);
      const int64_t lo = s * batch;
      const int64_t hi = std::min(lo + batch, n_train);

      GradTable acc;
      std::vector<LossReport> reports;
      for (int64_t k = lo; k < hi; ++k) {
        const int64_t idx = order[static_cast<size_t>(k)];
        Graph g;
        const Bound b = bind_params(g, params);
        ForwardOptions fo;
        fo.use_mask = use_mask;
        fo.image_ratio = image_ratio;
        fo.voxel_ratio = voxel_ratio;
        fo.image_seed = mix_seed(seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(idx), 1);
        fo.voxel_seed = mix_seed(seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(idx), 2);
        const ForwardResult r = forward_frame(g, b, train_frames[static_cast<size_t>(idx)], cfg, fo);
        if (!std::isfinite(r.loss.report.total)) {
          std::ofstream dump(out_dir + "/abort.txt");
          dump << "non-finite loss\nstep " << global_step << "\nepoch " << epoch << "\nscene "
               << idx << "\nlr " << fmt(lr) << "\n"
               << LossReport::csv_header() << "\n"
               << r.loss.report.csv_row(global_step, lr) << "\n";
          throw std::runtime_error("training aborted: non-finite loss at step " +
                                   std::to_string(global_step) + " (see " + out_dir +
                                   "/abort.txt)");
        }
        g.backward(r.loss.value);
        accumulate_grads(acc, g, b, params);
        reports.push_back(r.loss.report);
      }

      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (auto& [name, t] : acc)
        for (int64_t i = 0; i < t.numel(); ++i) t[i] *= inv;
      clip_global_norm(acc, params, clip_norm);
      optimizer.step(params, acc, lr);

      const LossReport step_report = mean_report(reports);
      metrics << step_report.csv_row(global_step, lr) << "\n";
      result.step_totals.push_back(step_report.total);
      epoch_total += step_report.total;
      ++global_step;
    }

    // Validation under fixed masks (no epoch in the seed), so epoch-to-epoch
    // numbers compare like with like.
    std::vector<LossReport> vreports;
    for (int64_t i = 0; i < n_val; ++i) {
      Graph g;
      const Bound b = bind_params(g, params);
      ForwardOptions fo;
      fo.use_mask = use_mask;
      fo.image_ratio = image_ratio;
      fo.voxel_ratio = voxel_ratio;
      fo.image_seed = mix_seed(seed, 0x7A1, static_cast<uint64_t>(i), 1);
      fo.voxel_seed = mix_seed(seed, 0x7A1, static_cast<uint64_t>(i), 2);
      fo.render_all = i == 0;
      const ForwardResult r = forward_frame(g, b, val_frames[static_cast<size_t>(i)], cfg, fo);
      vreports.push_back(r.loss.report);
      if (i == 0) {
        char tag[24];
        std::snprintf(tag, sizeof tag, "%03" PRId64, epoch);
        const std::string base = out_dir + "/samples/epoch_" + tag;
        write_ppm(base + "_masked.ppm", r.masked_image);
        write_ppm(base + "_color.ppm", r.color);
        Tensor unit_per = r.depth_per;
        for (int64_t j = 0; j < unit_per.numel(); ++j) unit_per[j] /= val_frames[0].rays_per.length();
        write_pgm16(base + "_depth_per.pgm", unit_per, 1.0 / 65535.0);
        Tensor unit_bev = r.depth_bev;
        for (int64_t j = 0; j < unit_bev.numel(); ++j) unit_bev[j] /= val_frames[0].rays_bev.length();
        write_pgm16(base + "_depth_bev.pgm", unit_bev, 1.0 / 65535.0);
      }
    }
    const LossReport val = mean_report(vreports);

    if (val.total < best_val) {
      best_val = val.total;
      best_params = params;
      best_epoch = epoch;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }

    EpochStats es;
    es.epoch = epoch;
    es.train_total = epoch_total / static_cast<double>(steps_per_epoch);
    es.val = val;
    es.best_val = best_val;
    result.epochs.push_back(es);
    validation << epoch << "," << fmt(val.raw_color) << "," << fmt(val.raw_depth_per) << ","
               << fmt(val.raw_depth_bev) << "," << fmt(val.total) << "," << fmt(best_val)
               << "\n";
    validation.flush();
    metrics.flush();
    if (!quiet)
      std::printf("epoch %3" PRId64 "  train %-12.6g  val %-12.6g  best %-12.6g\n", epoch,
                  es.train_total, val.total, best_val);

    if (bad_epochs >= patience) {
      result.early_stopped = true;
      break;
    }
  }

  result.steps_run = global_step;
  CheckpointMeta meta;
  meta.step = static_cast<uint64_t>(global_step);
  meta.epoch = static_cast<uint64_t>(best_epoch);
  meta.rng_state = shuffle_rng.state();
  meta.config_hash = cfg.fingerprint();
  save_checkpoint(out_dir + "/checkpoint.bin", best_params, meta);
  result.best.params = std::move(best_params);
  result.best.meta = meta;
  return result;
}

// ---- evaluation under corruption ----------------------------------------

EvalSummary evaluate_masked(const Config& cfg, const ParamStore& params, Split split,
                            double image_ratio, double voxel_ratio, uint64_t mask_seed) {
  const int64_t n = split_size(cfg, split);
  if (n < 1) throw std::runtime_error("eval split is empty");
  std::vector<LossReport> reports;
  reports.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    FrameData frame = make_frame(scene_seed(cfg, split, i), cfg);
    Graph g;
    const Bound b = bind_params(g, params);
    ForwardOptions fo;
    fo.use_mask = image_ratio > 0.0 || voxel_ratio > 0.0;
    fo.image_ratio = image_ratio;
    fo.voxel_ratio = voxel_ratio;
    fo.image_seed = mix_seed(mask_seed, 0xE7A, static_cast<uint64_t>(i), 1);
    fo.voxel_seed = mix_seed(mask_seed, 0xE7A, static_cast<uint64_t>(i), 2);
    reports.push_back(forward_frame(g, b, frame, cfg, fo).loss.report);
  }
  EvalSummary s;
  s.mean = mean_report(reports);
  s.frames = n;
  return s;
}

// ---- transfer probe ------------------------------------------------------

double miou_binary(const std::vector<int>& pred, const std::vector<int>& label) {
  if (pred.size() != label.size())
    throw std::invalid_argument("miou_binary: prediction/label size mismatch");
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, l = label[i] != 0;
    if (p && l)
      ++tp;
    else if (p && !l)
      ++fp;
    else if (!p && l)
      ++fn;
    else
      ++tn;
  }
  const int64_t u1 = tp + fp + fn;
  const int64_t u0 = tn + fn + fp;
  const double iou1 = u1 == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(u1);
  const double iou0 = u0 == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(u0);
  return 0.5 * (iou1 + iou0);
}

double run_probe_arm(const Config& cfg, const Checkpoint* pretrained, double label_fraction,
                     uint64_t seed) {
  if (!(label_fraction > 0.0 && label_fraction <= 1.0))
    throw std::invalid_argument("label_fraction must be in (0, 1], got " +
                                std::to_string(label_fraction));
  const NetSpec spec = net_spec_from(cfg);
  const GridMeta meta = grid_meta(spec);
  const int64_t iters = cfg.integer("probe.iterations");
  if (iters < 1) throw std::invalid_argument("probe.iterations must be >= 1");

  // Fresh embedding + linear head; both arms share this init (same seed), the
  // pretrained arm then overwrites the embedding from the checkpoint. The
  // head always starts fresh.
  ParamStore ps;
  init_embed_params(ps, spec, mix_seed(seed, 0x9B0, 0, 0));
  const int64_t width = meta.nz * (spec.ctx_channels + spec.lidar_channels);
  ps.add("probe.weight", uniform_init({width, 1}, 1.0 / std::sqrt(static_cast<double>(width)),
                                      mix_seed(seed, 0x9B2, 0, 0), "probe.weight"));
  ps.add("probe.bias", Tensor::zeros({1}));
  if (pretrained != nullptr) apply_prefix(ps, *pretrained);

  AdamW optimizer(ps, adamw_config_from(cfg));
  const double lr = cfg.number("train.max_lr");

  const int64_t n_pool = split_size(cfg, Split::ProbeTrain);
  if (n_pool < 1) throw std::runtime_error("probe labeled pool is empty");
  std::vector<int64_t> order(static_cast<size_t>(n_pool));
  for (int64_t i = 0; i < n_pool; ++i) order[static_cast<size_t>(i)] = i;
  Rng pool_rng(mix_seed(seed, 0x9B1, 0, 0));
  pool_rng.shuffle(order);
  const int64_t n_labeled =
      std::max<int64_t>(1, std::llround(label_fraction * static_cast<double>(n_pool)));

  std::vector<FrameData> frames;
  frames.reserve(static_cast<size_t>(n_labeled));
  for (int64_t k = 0; k < n_labeled; ++k)
    frames.push_back(make_frame(scene_seed(cfg, Split::ProbeTrain, order[static_cast<size_t>(k)]), cfg));

  for (int64_t it = 0; it < iters; ++it) {
    FrameData& frame = frames[static_cast<size_t>(it % n_labeled)];
    Graph g;
    const Bound b = bind_params(g, ps);
    Var z = probe_logits(g, b, frame, spec, meta);
    const Tensor labels =
        Tensor::from({meta.nx * meta.ny}, frame.bev_targets.depth_valid.data);
    Var y = g.constant(labels);
    // BCE via softplus: y*softplus(-z) + (1-y)*softplus(z), mean over columns.
    Var loss = mean(add(mul(y, softplus(neg(z))), mul(shift(neg(y), 1.0), softplus(z))));
    g.backward(loss);
    GradTable grads;
    for (const std::string& name : ps.names())
      if (g.has_grad(b.at(name))) grads.emplace(name, g.grad(b.at(name)));
    optimizer.step(ps, grads, lr);
  }

  const int64_t n_test = split_size(cfg, Split::ProbeTest);
  if (n_test < 1) throw std::runtime_error("probe test split is empty");
  std::vector<int> pred, label;
  pred.reserve(static_cast<size_t>(n_test * meta.nx * meta.ny));
  label.reserve(pred.capacity());
  for (int64_t i = 0; i < n_test; ++i) {
    FrameData frame = make_frame(scene_seed(cfg, Split::ProbeTest, i), cfg);
    Graph g;
    const Bound b = bind_params(g, ps);
    const Tensor& z = probe_logits(g, b, frame, spec, meta).value();
    for (int64_t c = 0; c < z.numel(); ++c) {
      pred.push_back(z[c] >= 0.0 ? 1 : 0);
      label.push_back(frame.bev_targets.depth_valid[c] != 0.0 ? 1 : 0);
    }
  }
  return miou_binary(pred, label);
}

ProbeResult transfer_probe(const Config& cfg, const Checkpoint& pretrained, double label_fraction,
                           uint64_t seed) {
  ProbeResult r;
  r.pretrained = run_probe_arm(cfg, &pretrained, label_fraction, seed);
  r.scratch = run_probe_arm(cfg, nullptr, label_fraction, seed);
  return r;
}

}  // namespace nsmae
