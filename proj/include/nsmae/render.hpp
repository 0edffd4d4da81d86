// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "nsmae/embed_net.hpp"
#include "nsmae/graph.hpp"
#include "nsmae/params.hpp"
#include "nsmae/scene.hpp"

namespace nsmae {

enum class View { PER, BEV };
enum class Target { Color, Depth, Any };

/// Conditional rendering network output: non-negative density plus activated
/// radiance, aligned with the embedding grid (one sample layer per depth bin
/// or voxel layer).
struct FeatureVolume {
  View view = View::PER;
  Var sigma;     // [n1, n2, n_samples, 1], softplus-activated
  Var radiance;  // [n1, n2, n_samples, A]; sigmoid [0,1] color or softplus
};

/// One ray per view-grid cell with constant per-sample steps. PER rays leave
/// the camera through embedding-cell centers; BEV rays descend every (x, y)
/// column from the top of the grid.
struct RayBundle {
  View view = View::PER;
  int64_t n1 = 0, n2 = 0;  // view grid extents: rows x cols (PER) or x, y (BEV)
  int64_t samples = 0;
  double delta = 0.0;            // meters per sample step
  std::vector<Vec3> origins;     // n1*n2, row-major
  std::vector<Vec3> directions;  // unit norm

  int64_t rays() const { return n1 * n2; }
  double length() const { return delta * static_cast<double>(samples); }
};

struct Composited {
  Var value;    // weighted radiance sum; shape of sigma minus the sample axis (+A)
  Var opacity;  // sum of weights per ray, in [0, 1]
};

struct RenderedMap {
  View view = View::PER;
  Target target = Target::Color;
  Var value;    // [n1, n2, A] for Color/Any, [n1, n2] for Depth
  Var opacity;  // [n1, n2]
};

/// Registers per_head.* and bev_head.* — the two views decode through
/// disjoint parameter sets.
void init_render_params(ParamStore& ps, const NetSpec& spec, uint64_t seed);

/// f(x, omega, e): maps an embedding to (sigma, radiance) on the same grid.
/// PER consumes [H/k, W/k, D, C] and emits RGB; BEV consumes the fused
/// [X, Y, Z, C_I+C_L] and emits a single softplus radiance channel.
FeatureVolume render_head(const Bound& p, Var embedding, View view, const NetSpec& spec);

/// T_i = exp(-sum_{j<i} sigma_j delta_j) along the last axis of sigma.
/// delta's last extent must match; values are validated (sigma >= 0,
/// delta > 0).
Var transmittance(Var sigma, Var delta);
/// w_i = T_i (1 - exp(-sigma_i delta_i)).
Var composite_weights(Var sigma, Var delta);

/// Generic composite: value = sum_i w_i a_i, with a carrying one trailing
/// channel axis beyond sigma.
Composited composite_any(Var sigma, Var delta, Var a);
Composited composite_color(Var sigma, Var delta, Var color);
/// Literal accumulated-distance form: value = sum_i w_i sum_{j<i} delta_j
/// (the i=1 term is the empty sum, zero).
Composited composite_depth(Var sigma, Var delta);

RayBundle build_rays_perspective(const CameraRig& rig, const NetSpec& spec);
RayBundle build_rays_bev(const GridMeta& meta, double delta);

/// Composites a feature volume along its sample axis onto the view grid.
/// BEV volumes are traversed top-down (z flipped) to match the descending
/// rays.
RenderedMap render_view(const FeatureVolume& vol, const RayBundle& rays, Target target);

}  // namespace nsmae
