// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0
//
// Pre-training driver. Frames are synthesized from seeded scenes, masked,
// encoded, fused, and rendered back against oracle targets; AdamW under a
// one-cycle schedule minimizes the weighted reconstruction objective with
// early stopping on validation loss. A BEV-occupancy linear probe measures
// how much the learned embedding transfers.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nsmae/checkpoint.hpp"
#include "nsmae/config.hpp"
#include "nsmae/grad_check.hpp"
#include "nsmae/objective.hpp"
#include "nsmae/optim.hpp"

namespace nsmae {

// ---- config -> module settings ----------------------------------------

NetSpec net_spec_from(const Config& cfg);
LossWeights loss_weights_from(const Config& cfg);
Aabb world_bounds_from(const Config& cfg);
AdamWConfig adamw_config_from(const Config& cfg);

// ---- scene pools -------------------------------------------------------

/// Disjoint seeded scene pools. Train/Val drive pre-training; ProbeTrain is
/// the probe's labeled pool and ProbeTest its held-out scoring set.
enum class Split { Train, Val, ProbeTrain, ProbeTest };

int64_t split_size(const Config& cfg, Split split);
uint64_t scene_seed(const Config& cfg, Split split, int64_t index);

/// Order-sensitive seed mixer for masks, shuffles, and parameter init.
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d);

// ---- frame assembly ----------------------------------------------------

/// Everything one training frame needs, with the scene itself discarded:
/// ground-truth image, voxelized lidar features, both ray bundles, and the
/// oracle targets sampled along them. `routing` caches the geometric
/// lift-splat table on first use (it depends only on the rig and grid).
struct FrameData {
  CameraRig rig;
  Tensor image;           // [H, W, 3] ground-truth camera image
  Tensor voxel_features;  // [X, Y, Z, 2] occupancy + mean intensity
  RayTargets per_targets;
  RayTargets bev_targets;
  RayBundle rays_per;
  RayBundle rays_bev;
  std::shared_ptr<const std::vector<int64_t>> routing;
};

/// Scene -> sensors -> targets for one seed. The camera sits on a ring
/// around the scene (angle drawn from the seed) and the lidar scans from
/// above the center, so every frame sees the world from a fresh viewpoint.
FrameData make_frame(uint64_t seed, const Config& cfg);

// ---- forward pass ------------------------------------------------------

struct ForwardOptions {
  bool use_mask = true;  // master switch; ratios of 0 also disable a branch
  double image_ratio = 0.5;
  double voxel_ratio = 0.9;
  uint64_t image_seed = 0;
  uint64_t voxel_seed = 0;
  bool want_loss = true;   // false renders without building loss nodes
  bool render_all = false; // force every head even if its loss is off
};

struct ForwardResult {
  bool has_loss = false;
  TotalLoss loss;       // valid only when has_loss
  Tensor masked_image;  // [H, W, 3] input actually fed to the encoder
  Tensor image_mask;    // [H, W] {0,1}; empty when unmasked
  Tensor color;         // [H/k, W/k, 3] rendered color; empty if head skipped
  Tensor depth_per;     // [H/k, W/k] meters from the camera
  Tensor depth_bev;     // [X, Y] meters down from the grid top
};

/// Masked-encode-render-reconstruct for one frame on the caller's graph.
/// Heads follow the loss.* switches unless render_all is set. When the
/// image is unmasked, loss.on_masked_only falls back to scoring every ray
/// (there is no masked set to restrict to).
ForwardResult forward_frame(Graph& g, const Bound& p, FrameData& frame, const Config& cfg,
                            const ForwardOptions& opt);

/// camera.* + lidar.* + mask.token + per_head.* + bev_head.*, seeded from
/// train.seed.
ParamStore init_pipeline_params(const Config& cfg);

/// Central-difference check of the full pipeline (all targets on, default
/// weights) against the analytic gradients, sampling `coords_per_param`
/// coordinates from every parameter tensor.
GradCheckReport pipeline_grad_check(const Config& cfg, int64_t coords_per_param, double eps);

// ---- pre-training ------------------------------------------------------

struct EpochStats {
  int64_t epoch = 0;      // 1-based
  double train_total = 0; // mean weighted total over the epoch's steps
  LossReport val;         // mean over validation frames, fixed masks
  double best_val = 0;    // best validation total so far
};

struct PretrainResult {
  Checkpoint best;  // best-validation parameters + provenance metadata
  std::vector<EpochStats> epochs;
  std::vector<double> step_totals;  // per-step mean training total
  int64_t steps_run = 0;
  bool early_stopped = false;
};

/// Runs the full loop and writes metrics.csv (per step), validation.csv
/// (per epoch), sample renders for the first validation frame, and
/// checkpoint.bin (best) under out_dir. Throws on non-finite loss after
/// dumping abort.txt.
PretrainResult pretrain(const Config& cfg, const std::string& out_dir, bool quiet = false);

// ---- evaluation under corruption ----------------------------------------

struct EvalSummary {
  LossReport mean;     // numeric fields averaged over frames, rays summed
  int64_t frames = 0;
};

/// Reconstruction error of `params` on a scene pool with the stated mask
/// ratios applied to the inputs (targets stay clean). Throws on an empty
/// split.
EvalSummary evaluate_masked(const Config& cfg, const ParamStore& params, Split split,
                            double image_ratio, double voxel_ratio, uint64_t mask_seed);

// ---- transfer probe ------------------------------------------------------

/// Mean of per-class IoU over {occupied, free}; a class absent from both
/// prediction and label counts as IoU 1.
double miou_binary(const std::vector<int>& pred, const std::vector<int>& label);

/// One probe arm: embedding network + fresh linear head on the flattened
/// BEV z-columns, fine-tuned end-to-end with BCE on per-column occupancy
/// for a fixed iteration count over the first round(fraction * pool) scenes
/// of a seed-shuffled labeled pool; returns pooled mIoU on ProbeTest.
/// `pretrained` == nullptr starts from scratch; otherwise the checkpoint's
/// embedding parameters are copied in (the head always starts fresh).
double run_probe_arm(const Config& cfg, const Checkpoint* pretrained, double label_fraction,
                     uint64_t seed);

struct ProbeResult {
  double pretrained = 0.0;
  double scratch = 0.0;
};

/// Both arms under identical seeds and iteration budgets.
ProbeResult transfer_probe(const Config& cfg, const Checkpoint& pretrained, double label_fraction,
                           uint64_t seed);

}  // namespace nsmae
