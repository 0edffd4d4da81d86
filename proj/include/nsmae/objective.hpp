// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "nsmae/render.hpp"

namespace nsmae {

/// Loss coefficients and p-norm exponents for the combined reconstruction
/// objective: total = λ_C·L_C + λ_Dper·L_Dper + λ_Dbev·L_Dbev with the
/// squared L2 norm on color and the L1 norm on depth by default.
struct LossWeights {
  double lambda_color = 1e4;
  double lambda_depth_per = 1e-2;
  double lambda_depth_bev = 1e-2;
  double p_color = 2.0;
  double p_depth = 1.0;

  /// Throws unless every λ ≥ 0 and every p ≥ 1.
  void validate() const;
};

/// Ground-truth reconstruction targets sampled along a ray bundle. Depth is
/// normalized to [0, 1] as the fraction of the ray's sampling span, matching
/// normalize_rendered_depth on the rendered side; rays with no defined depth
/// (sky, empty BEV columns) carry depth_valid = 0 and depth 0.
struct RayTargets {
  Tensor color;        // [n1, n2, 3]; data is empty for BEV targets
  Tensor depth;        // [n1, n2] in [0, 1]
  Tensor depth_valid;  // [n1, n2] in {0, 1}
};

/// Oracle color and depth along the bundle's exact rays (same constructor as
/// the renderer, so target and prediction are sampled identically). Misses
/// keep the sky color (0,0,0) and are invalid for depth; hit distances are
/// mapped to (t − depth_min)/(depth_max − depth_min) and clamped to [0, 1].
RayTargets perspective_targets(const Scene& scene, const RayBundle& rays, const NetSpec& spec);

/// Oracle BEV depth: per (x, y) column, the distance from the grid's top
/// plane down to the center of the first occupied voxel, divided by the
/// grid's z extent. Columns without occupancy are invalid.
RayTargets bev_targets(const VoxelGrid& grid);

/// Rendered depth divided by its ray length Σδ, onto the same [0, 1] axis as
/// the targets above.
Var normalize_rendered_depth(const RenderedMap& map, const RayBundle& rays);

/// One reconstruction term: the scalar loss node plus the size of its ray
/// support set |S_r|.
struct RayLoss {
  Var value;
  int64_t ray_count = 0;
};

/// Masked Lp reconstruction loss: (1/|S_r|) Σ_{valid rays} Σ_channels
/// |rendered − target|^p. The validity mask marks S_r over the ray grid; a
/// trailing channel axis on `rendered` (absent from the mask) is summed, not
/// averaged. An empty S_r yields a constant 0 and bumps the warning counter.
/// p = 1 uses subgradient 0 at exact ties.
RayLoss lp_loss(Var rendered, const Tensor& target, const Tensor& validity, double p);

/// Number of lp_loss calls that saw an empty ray set since the last reset.
uint64_t lp_loss_empty_count();
void reset_lp_loss_empty_count();

/// Host-side numbers for one objective evaluation, for logging and CSV
/// metrics. `total` equals the left-fold sum of the enabled weighted terms
/// in (color, depth_per, depth_bev) order, exactly.
struct LossReport {
  bool has_color = false, has_depth_per = false, has_depth_bev = false;
  double raw_color = 0.0, raw_depth_per = 0.0, raw_depth_bev = 0.0;
  double weighted_color = 0.0, weighted_depth_per = 0.0, weighted_depth_bev = 0.0;
  double total = 0.0;
  int64_t rays_color = 0, rays_depth_per = 0, rays_depth_bev = 0;

  /// CSV column names, beginning with step and lr.
  static std::string csv_header();
  /// One CSV row matching csv_header(); disabled targets print empty cells.
  /// Doubles use %.17g so logged values round-trip exactly.
  std::string csv_row(int64_t step, double lr) const;
};

struct TotalLoss {
  Var value;  // scalar
  LossReport report;
};

/// Combined objective over the enabled targets. Each term is scaled by its λ
/// and the scaled terms are summed in (color, depth_per, depth_bev) order.
/// Rejects an empty selection and terms living on different graphs.
TotalLoss total_loss(const std::optional<RayLoss>& color,
                     const std::optional<RayLoss>& depth_per,
                     const std::optional<RayLoss>& depth_bev, const LossWeights& weights);

}  // namespace nsmae
