// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/embed_net.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace nsmae {

std::vector<double> NetSpec::depth_bin_edges() const {
  std::vector<double> edges(static_cast<size_t>(depth_bins) + 1);
  const double step = (depth_max - depth_min) / depth_bins;
  for (int i = 0; i <= depth_bins; ++i) edges[static_cast<size_t>(i)] = depth_min + step * i;
  return edges;
}

void NetSpec::validate() const {
  if (kappa != 4) throw std::invalid_argument("the camera encoder realizes kappa = 4");
  if (image_h % kappa != 0 || image_w % kappa != 0)
    throw std::invalid_argument("image extents must be divisible by kappa");
  if (image_h < 2 * kappa || image_w < 2 * kappa)
    throw std::invalid_argument("image too small for the conv stack");
  if (depth_bins < 1) throw std::invalid_argument("depth_bins must be positive");
  if (ctx_channels < 1 || lidar_channels < 1)
    throw std::invalid_argument("channel counts must be positive");
  if (!(depth_min > 0.0) || !(depth_max > depth_min))
    throw std::invalid_argument("need 0 < depth_min < depth_max");
  if (nx < 1 || ny < 1 || nz < 1) throw std::invalid_argument("grid extents must be positive");
  if (!(voxel > 0.0)) throw std::invalid_argument("voxel size must be positive");
}

GridMeta grid_meta(const NetSpec& spec) {
  return GridMeta{spec.grid_range, Vec3(spec.voxel, spec.voxel, spec.voxel), spec.nx, spec.ny,
                  spec.nz};
}

GridMeta grid_meta(const VoxelGrid& grid) {
  return GridMeta{grid.range, grid.voxel_size, grid.nx, grid.ny, grid.nz};
}

namespace {

Tensor conv_init(const std::string& name, int64_t c_in, int64_t c_out, uint64_t seed) {
  const double limit = 1.0 / std::sqrt(9.0 * static_cast<double>(c_in));
  return uniform_init({3, 3, c_in, c_out}, limit, seed, name);
}

Tensor affine_init(const std::string& name, int64_t c_in, int64_t c_out, uint64_t seed) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(c_in));
  return uniform_init({c_in, c_out}, limit, seed, name);
}

}  // namespace

void init_embed_params(ParamStore& ps, const NetSpec& spec, uint64_t seed) {
  spec.validate();
  const int64_t c = spec.ctx_channels;
  const int64_t head = c + spec.depth_bins;

  ps.add("camera.conv1.kernel", conv_init("camera.conv1.kernel", 3, 12, seed));
  ps.add("camera.conv1.bias", Tensor::zeros({12}));
  ps.add("camera.conv2.kernel", conv_init("camera.conv2.kernel", 12, 12, seed));
  ps.add("camera.conv2.bias", Tensor::zeros({12}));
  ps.add("camera.conv3.kernel", conv_init("camera.conv3.kernel", 12, head, seed));
  ps.add("camera.conv3.bias", Tensor::zeros({head}));

  ps.add("lidar.in.weight", affine_init("lidar.in.weight", 2, 6, seed));
  ps.add("lidar.in.bias", Tensor::zeros({6}));
  ps.add("lidar.conv.kernel", conv_init("lidar.conv.kernel", 6, 6, seed));
  ps.add("lidar.conv.bias", Tensor::zeros({6}));
  ps.add("lidar.out.weight", affine_init("lidar.out.weight", 6, spec.lidar_channels, seed));
  ps.add("lidar.out.bias", Tensor::zeros({spec.lidar_channels}));

  ps.add("mask.token",
         uniform_init({spec.kappa, spec.kappa, 3}, 0.02, seed, "mask.token"));
}

PerspectiveEmbedding encode_camera(const Bound& p, Var masked_image, const NetSpec& spec) {
  spec.validate();
  const Shape& in = masked_image.shape();
  if (in.size() != 3 || in[0] != spec.image_h || in[1] != spec.image_w || in[2] != 3)
    throw std::invalid_argument("encode_camera expects an [image_h, image_w, 3] input");

  Var h1 = softplus(add(conv2d(masked_image, p.at("camera.conv1.kernel"), 2, 1),
                        p.at("camera.conv1.bias")));
  Var h2 = softplus(
      add(conv2d(h1, p.at("camera.conv2.kernel"), 1, 1), p.at("camera.conv2.bias")));
  Var h3 = add(conv2d(h2, p.at("camera.conv3.kernel"), 2, 1), p.at("camera.conv3.bias"));

  const int64_t gh = spec.grid_h(), gw = spec.grid_w();
  const int64_t c = spec.ctx_channels, d = spec.depth_bins;
  Var ctx = slice(h3, 2, 0, c);
  Var dist = softmax(slice(h3, 2, c, d), 2);

  Var feature = mul(reshape(dist, {gh, gw, d, 1}), reshape(ctx, {gh, gw, 1, c}));
  return PerspectiveEmbedding{feature, dist, spec.depth_bin_edges(), spec.kappa};
}

Var encode_lidar(const Bound& p, Var masked_features, const NetSpec& spec) {
  spec.validate();
  const Shape& in = masked_features.shape();
  if (in.size() != 4 || in[0] != spec.nx || in[1] != spec.ny || in[2] != spec.nz || in[3] != 2)
    throw std::invalid_argument("encode_lidar expects an [X, Y, Z, 2] input");

  Var h = permute(masked_features, {2, 0, 1, 3});  // [Z, X, Y, 2]
  h = softplus(affine(h, p.at("lidar.in.weight"), p.at("lidar.in.bias")));
  h = softplus(add(conv2d(h, p.at("lidar.conv.kernel"), 1, 1), p.at("lidar.conv.bias")));
  h = affine(h, p.at("lidar.out.weight"), p.at("lidar.out.bias"));
  return permute(h, {1, 2, 0, 3});  // [X, Y, Z, C_L]
}

std::shared_ptr<const std::vector<int64_t>> lift_routing(const CameraRig& rig,
                                                         const PerspectiveEmbedding& pe,
                                                         const GridMeta& meta) {
  rig.validate();
  const Shape& s = pe.feature.shape();
  if (s.size() != 4) throw std::invalid_argument("perspective embedding must be rank 4");
  const int64_t gh = s[0], gw = s[1], d = s[2];
  if (pe.depth_bin_edges.size() != static_cast<size_t>(d) + 1)
    throw std::invalid_argument("depth_bin_edges must have D + 1 entries");
  if (pe.kappa < 1) throw std::invalid_argument("kappa must be positive");
  if (rig.height != gh * pe.kappa || rig.width != gw * pe.kappa)
    throw std::invalid_argument("rig extents do not match the embedding grid");

  auto routing = std::make_shared<std::vector<int64_t>>();
  routing->reserve(static_cast<size_t>(gh * gw * d));
  for (int64_t v = 0; v < gh; ++v) {
    for (int64_t u = 0; u < gw; ++u) {
      const double row_c = (static_cast<double>(v) + 0.5) * pe.kappa;
      const double col_c = (static_cast<double>(u) + 0.5) * pe.kappa;
      Vec3 dir_cam((col_c - rig.cx) / rig.focal, (row_c - rig.cy) / rig.focal, 1.0);
      const Vec3 dir = rig.rotation * dir_cam.normalized();
      for (int64_t k = 0; k < d; ++k) {
        const double t =
            0.5 * (pe.depth_bin_edges[static_cast<size_t>(k)] +
                   pe.depth_bin_edges[static_cast<size_t>(k) + 1]);
        const Vec3 pt = rig.translation + t * dir;
        int64_t cell = -1;
        const int64_t ix = static_cast<int64_t>(std::floor((pt.x() - meta.range.lo.x()) /
                                                           meta.voxel_size.x()));
        const int64_t iy = static_cast<int64_t>(std::floor((pt.y() - meta.range.lo.y()) /
                                                           meta.voxel_size.y()));
        const int64_t iz = static_cast<int64_t>(std::floor((pt.z() - meta.range.lo.z()) /
                                                           meta.voxel_size.z()));
        if (ix >= 0 && ix < meta.nx && iy >= 0 && iy < meta.ny && iz >= 0 && iz < meta.nz)
          cell = (ix * meta.ny + iy) * meta.nz + iz;
        routing->push_back(cell);
      }
    }
  }
  return routing;
}

Var cam2world_lift_splat(const PerspectiveEmbedding& pe, const CameraRig& rig,
                         const GridMeta& meta) {
  return cam2world_lift_splat(pe, lift_routing(rig, pe, meta), meta);
}

Var cam2world_lift_splat(const PerspectiveEmbedding& pe,
                         std::shared_ptr<const std::vector<int64_t>> routing,
                         const GridMeta& meta) {
  const Shape& s = pe.feature.shape();
  if (s.size() != 4) throw std::invalid_argument("perspective embedding must be rank 4");
  const int64_t rows = s[0] * s[1] * s[2], c = s[3];
  if (!routing || static_cast<int64_t>(routing->size()) != rows)
    throw std::invalid_argument("routing length does not match the embedding");
  Var flat = reshape(pe.feature, {rows, c});
  Var pooled = scatter_rows(flat, std::move(routing), meta.cells());
  return reshape(pooled, {meta.nx, meta.ny, meta.nz, c});
}

Var fuse(Var cam_bev, Var lidar_bev) {
  if (cam_bev.shape().size() != 4 || lidar_bev.shape().size() != 4)
    throw std::invalid_argument("fuse expects rank-4 BEV embeddings");
  return concat(cam_bev, lidar_bev, 3);
}

}  // namespace nsmae
