// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "nsmae/graph.hpp"
#include "nsmae/params.hpp"
#include "nsmae/scene.hpp"

namespace nsmae {

/// Shape contract shared by the encoders, the lift-splat, and the render
/// heads. Defaults describe the desk-scale setup: a 32x64 camera, a 4x
/// downsampled embedding grid, 8 uniform metric depth bins reaching the
/// world diagonal, and a 64x64x16 BEV grid at 0.25 m voxels.
struct NetSpec {
  int image_h = 32;
  int image_w = 64;
  int kappa = 4;          // image -> embedding downsampling; the conv stack realizes exactly 4
  int depth_bins = 8;     // D
  int ctx_channels = 16;  // C_I, camera context width
  int lidar_channels = 16;  // C_L

  int64_t nx = 64, ny = 64, nz = 16;
  Aabb grid_range{Vec3(-8.0, -8.0, 0.0), Vec3(8.0, 8.0, 4.0)};
  double voxel = 0.25;

  double depth_min = 0.5;
  double depth_max = 22.978250586152114;  // |(16, 16, 4)|, the desk-world diagonal

  // Per-sample step lengths for volume rendering. The reference values are
  // "approximately set" constants, not derived from bin/voxel sizes;
  // physically consistent choices would equal the bin width and voxel height.
  double delta_per = 0.8;
  double delta_bev = 0.2;

  int grid_h() const { return image_h / kappa; }
  int grid_w() const { return image_w / kappa; }
  /// depth_bins + 1 monotone edges, uniform in metric depth.
  std::vector<double> depth_bin_edges() const;
  void validate() const;
};

/// BEV voxelization geometry needed to route lifted points into cells.
struct GridMeta {
  Aabb range;
  Vec3 voxel_size;
  int64_t nx = 0, ny = 0, nz = 0;
  int64_t cells() const { return nx * ny * nz; }
};

GridMeta grid_meta(const NetSpec& spec);
GridMeta grid_meta(const VoxelGrid& grid);

/// Camera-branch output: per-cell features [H/k, W/k, D, C] given by the
/// normalized depth distribution times the context vector, plus the
/// distribution itself and the metric bin edges used to lift it.
struct PerspectiveEmbedding {
  Var feature;
  Var depth_dist;  // [H/k, W/k, D]; each D-slice sums to 1
  std::vector<double> depth_bin_edges;
  int kappa = 0;
};

/// Registers camera.*, lidar.*, and mask.token with fan-in scaled uniform
/// init (biases zero). Keep the seed fixed to reproduce a network.
void init_embed_params(ParamStore& ps, const NetSpec& spec, uint64_t seed);

PerspectiveEmbedding encode_camera(const Bound& p, Var masked_image, const NetSpec& spec);

/// Masked voxel features [X, Y, Z, 2] -> BEV embedding [X, Y, Z, C_L].
/// Z-stacked 2D convolution, so extents are preserved exactly.
Var encode_lidar(const Bound& p, Var masked_features, const NetSpec& spec);

/// Flat BEV cell index for every (v, u, d) embedding cell, in the row-major
/// order of PerspectiveEmbedding::feature; -1 where the bin-center point
/// leaves the grid. Depends only on geometry, so cache it per frame.
std::shared_ptr<const std::vector<int64_t>> lift_routing(const CameraRig& rig,
                                                         const PerspectiveEmbedding& pe,
                                                         const GridMeta& meta);

/// Sum-pools each embedding cell's feature into the BEV voxel containing its
/// bin-center point along the pixel ray: [H/k, W/k, D, C] -> [X, Y, Z, C].
Var cam2world_lift_splat(const PerspectiveEmbedding& pe, const CameraRig& rig,
                         const GridMeta& meta);
Var cam2world_lift_splat(const PerspectiveEmbedding& pe,
                         std::shared_ptr<const std::vector<int64_t>> routing,
                         const GridMeta& meta);

/// Concatenates the camera and lidar BEV embeddings along channels. No
/// parameters; each input survives as a bit-identical slice of the output.
Var fuse(Var cam_bev, Var lidar_bev);

}  // namespace nsmae
