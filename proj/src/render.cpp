// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/render.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace nsmae {

namespace {

Tensor head_conv_init(const std::string& name, int64_t c_in, int64_t c_out, uint64_t seed) {
  const double limit = 1.0 / std::sqrt(9.0 * static_cast<double>(c_in));
  return uniform_init({3, 3, c_in, c_out}, limit, seed, name);
}

Tensor head_affine_init(const std::string& name, int64_t c_in, int64_t c_out, uint64_t seed) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(c_in));
  return uniform_init({c_in, c_out}, limit, seed, name);
}

void check_samples(const Var& sigma, const Var& delta) {
  const Shape& ss = sigma.shape();
  const Shape& ds = delta.shape();
  if (ss.empty() || ds.empty())
    throw std::invalid_argument("transmittance needs at least one sample axis");
  if (ss.back() != ds.back())
    throw std::invalid_argument("sigma/delta sample length mismatch: " + shape_str(ss) +
                                " vs " + shape_str(ds));
  const Tensor& sv = sigma.value();
  for (int64_t i = 0; i < sv.numel(); ++i)
    if (sv[i] < 0.0) throw std::invalid_argument("negative sigma at sample " + std::to_string(i));
  const Tensor& dv = delta.value();
  for (int64_t i = 0; i < dv.numel(); ++i)
    if (!(dv[i] > 0.0)) throw std::invalid_argument("delta must be positive");
}

}  // namespace

void init_render_params(ParamStore& ps, const NetSpec& spec, uint64_t seed) {
  spec.validate();
  const int64_t dc = static_cast<int64_t>(spec.depth_bins) * spec.ctx_channels;
  const int64_t out = 4 * static_cast<int64_t>(spec.depth_bins);
  ps.add("per_head.conv1.kernel", head_conv_init("per_head.conv1.kernel", dc, 32, seed));
  ps.add("per_head.conv1.bias", Tensor::zeros({32}));
  ps.add("per_head.conv2.kernel", head_conv_init("per_head.conv2.kernel", 32, out, seed));
  ps.add("per_head.conv2.bias", Tensor::zeros({out}));

  const int64_t fused = spec.ctx_channels + spec.lidar_channels;
  ps.add("bev_head.fc1.weight", head_affine_init("bev_head.fc1.weight", fused, 8, seed));
  ps.add("bev_head.fc1.bias", Tensor::zeros({8}));
  ps.add("bev_head.fc2.weight", head_affine_init("bev_head.fc2.weight", 8, 2, seed));
  ps.add("bev_head.fc2.bias", Tensor::zeros({2}));
}

FeatureVolume render_head(const Bound& p, Var embedding, View view, const NetSpec& spec) {
  spec.validate();
  const Shape& in = embedding.shape();
  if (view == View::PER) {
    const int64_t gh = spec.grid_h(), gw = spec.grid_w();
    const int64_t d = spec.depth_bins, c = spec.ctx_channels;
    if (in != Shape{gh, gw, d, c})
      throw std::invalid_argument("PER head expects [H/k, W/k, D, C], got " + shape_str(in));
    Var x = reshape(embedding, {gh, gw, d * c});
    x = softplus(
        add(conv2d(x, p.at("per_head.conv1.kernel"), 1, 1), p.at("per_head.conv1.bias")));
    x = add(conv2d(x, p.at("per_head.conv2.kernel"), 1, 1), p.at("per_head.conv2.bias"));
    x = reshape(x, {gh, gw, d, 4});
    return FeatureVolume{View::PER, softplus(slice(x, 3, 0, 1)), sigmoid(slice(x, 3, 1, 3))};
  }
  const int64_t fused = spec.ctx_channels + spec.lidar_channels;
  if (in != Shape{spec.nx, spec.ny, spec.nz, fused})
    throw std::invalid_argument("BEV head expects [X, Y, Z, C_I+C_L], got " + shape_str(in));
  Var h = softplus(affine(embedding, p.at("bev_head.fc1.weight"), p.at("bev_head.fc1.bias")));
  h = affine(h, p.at("bev_head.fc2.weight"), p.at("bev_head.fc2.bias"));
  return FeatureVolume{View::BEV, softplus(slice(h, 3, 0, 1)), softplus(slice(h, 3, 1, 1))};
}

Var transmittance(Var sigma, Var delta) {
  check_samples(sigma, delta);
  Var optical = mul(sigma, delta);
  return vexp(neg(exclusive_prefix_sum(optical, static_cast<int>(optical.shape().size()) - 1)));
}

Var composite_weights(Var sigma, Var delta) {
  Var t = transmittance(sigma, delta);
  Var absorb = shift(neg(vexp(neg(mul(sigma, delta)))), 1.0);  // 1 - exp(-sigma delta)
  return mul(t, absorb);
}

Composited composite_any(Var sigma, Var delta, Var a) {
  Var w = composite_weights(sigma, delta);
  const Shape& ws = w.shape();
  const Shape& as = a.shape();
  if (as.size() != ws.size() + 1 ||
      !std::equal(ws.begin(), ws.end(), as.begin()))
    throw std::invalid_argument("radiance must be sigma's shape plus a channel axis, got " +
                                shape_str(as) + " for weights " + shape_str(ws));
  Shape lifted = ws;
  lifted.push_back(1);
  const int sample_axis = static_cast<int>(ws.size()) - 1;
  Var value = sum(mul(reshape(w, lifted), a), sample_axis);
  return Composited{value, sum(w, sample_axis)};
}

Composited composite_color(Var sigma, Var delta, Var color) {
  return composite_any(sigma, delta, color);
}

Composited composite_depth(Var sigma, Var delta) {
  Var w = composite_weights(sigma, delta);
  Var dist = exclusive_prefix_sum(delta, static_cast<int>(delta.shape().size()) - 1);
  const int sample_axis = static_cast<int>(w.shape().size()) - 1;
  return Composited{sum(mul(w, dist), sample_axis), sum(w, sample_axis)};
}

RayBundle build_rays_perspective(const CameraRig& rig, const NetSpec& spec) {
  spec.validate();
  rig.validate();
  if (rig.height != spec.image_h || rig.width != spec.image_w)
    throw std::invalid_argument("rig extents do not match the spec image");
  RayBundle b;
  b.view = View::PER;
  b.n1 = spec.grid_h();
  b.n2 = spec.grid_w();
  b.samples = spec.depth_bins;
  b.delta = spec.delta_per;
  b.origins.reserve(static_cast<size_t>(b.rays()));
  b.directions.reserve(static_cast<size_t>(b.rays()));
  for (int64_t v = 0; v < b.n1; ++v)
    for (int64_t u = 0; u < b.n2; ++u) {
      const double row_c = (static_cast<double>(v) + 0.5) * spec.kappa;
      const double col_c = (static_cast<double>(u) + 0.5) * spec.kappa;
      Vec3 dir_cam((col_c - rig.cx) / rig.focal, (row_c - rig.cy) / rig.focal, 1.0);
      b.origins.push_back(rig.translation);
      b.directions.push_back(rig.rotation * dir_cam.normalized());
    }
  return b;
}

RayBundle build_rays_bev(const GridMeta& meta, double delta) {
  if (meta.nx < 1 || meta.ny < 1 || meta.nz < 1)
    throw std::invalid_argument("BEV grid extents must be positive");
  if (!(delta > 0.0)) throw std::invalid_argument("delta must be positive");
  RayBundle b;
  b.view = View::BEV;
  b.n1 = meta.nx;
  b.n2 = meta.ny;
  b.samples = meta.nz;
  b.delta = delta;
  b.origins.reserve(static_cast<size_t>(b.rays()));
  b.directions.reserve(static_cast<size_t>(b.rays()));
  for (int64_t x = 0; x < meta.nx; ++x)
    for (int64_t y = 0; y < meta.ny; ++y) {
      b.origins.emplace_back(meta.range.lo.x() + (static_cast<double>(x) + 0.5) * meta.voxel_size.x(),
                             meta.range.lo.y() + (static_cast<double>(y) + 0.5) * meta.voxel_size.y(),
                             meta.range.hi.z());
      b.directions.emplace_back(0.0, 0.0, -1.0);
    }
  return b;
}

RenderedMap render_view(const FeatureVolume& vol, const RayBundle& rays, Target target) {
  if (vol.view != rays.view) throw std::invalid_argument("feature volume / ray bundle view mismatch");
  if (!vol.sigma.valid()) throw std::invalid_argument("feature volume has no sigma");
  // Copied by value: ss is consulted again after ops are appended below.
  const Shape ss = vol.sigma.shape();
  if (ss.size() != 4 || ss[3] != 1)
    throw std::invalid_argument("sigma volume must be [n1, n2, samples, 1], got " + shape_str(ss));
  if (ss[0] != rays.n1 || ss[1] != rays.n2 || ss[2] != rays.samples)
    throw std::invalid_argument("volume layout does not match the ray bundle: " + shape_str(ss));

  Var sigma = reshape(vol.sigma, {ss[0], ss[1], ss[2]});
  Var radiance = vol.radiance;
  if (vol.view == View::BEV) {
    sigma = flip(sigma, 2);
    radiance = flip(radiance, 2);
  }
  Graph& g = *vol.sigma.graph;
  Var delta = g.constant(Tensor::full({rays.samples}, rays.delta));

  RenderedMap out;
  out.view = vol.view;
  out.target = target;
  if (target == Target::Depth) {
    Composited c = composite_depth(sigma, delta);
    out.value = c.value;
    out.opacity = c.opacity;
    return out;
  }
  const Shape& rs = radiance.shape();
  if (rs.size() != 4 || rs[0] != ss[0] || rs[1] != ss[1] || rs[2] != ss[2])
    throw std::invalid_argument("radiance volume layout mismatch: " + shape_str(rs));
  Composited c = composite_any(sigma, delta, radiance);
  out.value = c.value;
  out.opacity = c.opacity;
  return out;
}

}  // namespace nsmae
