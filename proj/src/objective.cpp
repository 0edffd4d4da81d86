// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/objective.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <stdexcept>

namespace nsmae {

namespace {

std::atomic<uint64_t> g_empty_ray_sets{0};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_color >= 0.0) || !(lambda_depth_per >= 0.0) || !(lambda_depth_bev >= 0.0))
    throw std::invalid_argument("loss weights must be non-negative");
  if (!(p_color >= 1.0) || !(p_depth >= 1.0)) throw std::invalid_argument("p must be >= 1");
}

RayTargets perspective_targets(const Scene& scene, const RayBundle& rays, const NetSpec& spec) {
  if (rays.view != View::PER)
    throw std::invalid_argument("perspective_targets needs a PER ray bundle");
  spec.validate();
  if (rays.n1 != spec.grid_h() || rays.n2 != spec.grid_w())
    throw std::invalid_argument("ray bundle extents do not match the spec grid");
  RayTargets t;
  t.color = Tensor::zeros({rays.n1, rays.n2, 3});
  t.depth = Tensor::zeros({rays.n1, rays.n2});
  t.depth_valid = Tensor::zeros({rays.n1, rays.n2});
  const double span = spec.depth_max - spec.depth_min;
  for (int64_t i = 0; i < rays.rays(); ++i) {
    const RayHit hit = raycast(scene, rays.origins[static_cast<size_t>(i)],
                               rays.directions[static_cast<size_t>(i)]);
    if (!hit.hit) continue;  // sky stays (0,0,0); depth stays invalid
    t.color[3 * i + 0] = hit.color.x();
    t.color[3 * i + 1] = hit.color.y();
    t.color[3 * i + 2] = hit.color.z();
    t.depth[i] = std::clamp((hit.distance - spec.depth_min) / span, 0.0, 1.0);
    t.depth_valid[i] = 1.0;
  }
  return t;
}

RayTargets bev_targets(const VoxelGrid& grid) {
  const BevDepth bd = gt_bev_depth(grid);
  RayTargets t;
  t.depth = Tensor::zeros({grid.nx, grid.ny});
  t.depth_valid = bd.valid;
  const double extent = static_cast<double>(grid.nz) * grid.voxel_size.z();
  for (int64_t i = 0; i < t.depth.numel(); ++i)
    if (bd.valid[i] == 1.0) t.depth[i] = bd.depth[i] / extent;
  return t;
}

Var normalize_rendered_depth(const RenderedMap& map, const RayBundle& rays) {
  if (map.target != Target::Depth)
    throw std::invalid_argument("normalize_rendered_depth expects a depth map");
  if (map.view != rays.view)
    throw std::invalid_argument("rendered map / ray bundle view mismatch");
  return scale(map.value, 1.0 / (static_cast<double>(rays.samples) * rays.delta));
}

RayLoss lp_loss(Var rendered, const Tensor& target, const Tensor& validity, double p) {
  if (!rendered.valid()) throw std::invalid_argument("lp_loss needs a valid rendered map");
  if (!(p >= 1.0)) throw std::invalid_argument("p must be >= 1");
  // Copied by value: consulted after ops are appended below.
  const Shape rs = rendered.shape();
  if (!same_shape(rs, target.shape))
    throw std::invalid_argument("rendered/target shape mismatch: " + shape_str(rs) + " vs " +
                                shape_str(target.shape));
  const Shape& ms = validity.shape;
  const bool channel_axis = rs.size() == ms.size() + 1;
  if (!channel_axis && !same_shape(rs, ms))
    throw std::invalid_argument("validity mask must match the rendered rays: " + shape_str(ms) +
                                " against " + shape_str(rs));
  if (channel_axis)
    for (size_t i = 0; i < ms.size(); ++i)
      if (rs[i] != ms[i])
        throw std::invalid_argument("validity mask must match the rendered rays: " +
                                    shape_str(ms) + " against " + shape_str(rs));

  int64_t in_set = 0;
  for (int64_t i = 0; i < validity.numel(); ++i) {
    const double v = validity[i];
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("validity mask entries must be 0 or 1");
    if (v == 1.0) ++in_set;
  }
  Graph& g = *rendered.graph;
  if (in_set == 0) {
    g_empty_ray_sets.fetch_add(1, std::memory_order_relaxed);
    return RayLoss{g.constant(Tensor::scalar(0.0)), 0};
  }

  Var diff = sub(rendered, g.constant(target));
  Var err;
  if (p == 2.0)
    err = mul(diff, diff);
  else if (p == 1.0)
    err = vabs(diff);
  else
    err = vpow(vabs(diff), p);

  Tensor mask = validity;
  if (channel_axis) {
    Shape lifted = ms;
    lifted.push_back(1);
    mask = Tensor::from(lifted, validity.data);  // row-major reshape: same data
  }
  Var masked = mul(err, g.constant(mask));
  return RayLoss{scale(sum(masked), 1.0 / static_cast<double>(in_set)), in_set};
}

uint64_t lp_loss_empty_count() { return g_empty_ray_sets.load(std::memory_order_relaxed); }
void reset_lp_loss_empty_count() { g_empty_ray_sets.store(0, std::memory_order_relaxed); }

std::string LossReport::csv_header() {
  return "step,lr,raw_color,raw_depth_per,raw_depth_bev,weighted_color,weighted_depth_per,"
         "weighted_depth_bev,total,rays_color,rays_depth_per,rays_depth_bev";
}

std::string LossReport::csv_row(int64_t step, double lr) const {
  std::string row = std::to_string(step) + "," + fmt_double(lr);
  const auto cell = [&row](bool on, double v) { row += on ? "," + fmt_double(v) : ","; };
  cell(has_color, raw_color);
  cell(has_depth_per, raw_depth_per);
  cell(has_depth_bev, raw_depth_bev);
  cell(has_color, weighted_color);
  cell(has_depth_per, weighted_depth_per);
  cell(has_depth_bev, weighted_depth_bev);
  row += "," + fmt_double(total);
  row += "," + std::to_string(rays_color);
  row += "," + std::to_string(rays_depth_per);
  row += "," + std::to_string(rays_depth_bev);
  return row;
}

TotalLoss total_loss(const std::optional<RayLoss>& color, const std::optional<RayLoss>& depth_per,
                     const std::optional<RayLoss>& depth_bev, const LossWeights& weights) {
  weights.validate();
  if (!color && !depth_per && !depth_bev)
    throw std::invalid_argument("at least one reconstruction target must be enabled");

  const Graph* graph = nullptr;
  const auto check_term = [&graph](const std::optional<RayLoss>& term, const char* name) {
    if (!term) return;
    if (!term->value.valid() || !term->value.value().is_scalar())
      throw std::invalid_argument(std::string(name) + " loss must be a scalar graph node");
    if (graph == nullptr) graph = term->value.graph;
    if (term->value.graph != graph)
      throw std::invalid_argument("loss terms live on different graphs");
  };
  check_term(color, "color");
  check_term(depth_per, "depth_per");
  check_term(depth_bev, "depth_bev");

  TotalLoss out;
  Var total;
  // Fixed fold order (color, depth_per, depth_bev): the reported total equals
  // the same left-fold over the weighted doubles exactly.
  const auto fold = [&total](Var weighted) {
    total = total.valid() ? add(total, weighted) : weighted;
  };
  if (color) {
    Var weighted = scale(color->value, weights.lambda_color);
    out.report.has_color = true;
    out.report.raw_color = color->value.value()[0];
    out.report.weighted_color = weighted.value()[0];
    out.report.rays_color = color->ray_count;
    fold(weighted);
  }
  if (depth_per) {
    Var weighted = scale(depth_per->value, weights.lambda_depth_per);
    out.report.has_depth_per = true;
    out.report.raw_depth_per = depth_per->value.value()[0];
    out.report.weighted_depth_per = weighted.value()[0];
    out.report.rays_depth_per = depth_per->ray_count;
    fold(weighted);
  }
  if (depth_bev) {
    Var weighted = scale(depth_bev->value, weights.lambda_depth_bev);
    out.report.has_depth_bev = true;
    out.report.raw_depth_bev = depth_bev->value.value()[0];
    out.report.weighted_depth_bev = weighted.value()[0];
    out.report.rays_depth_bev = depth_bev->ray_count;
    fold(weighted);
  }
  out.value = total;
  out.report.total = total.value()[0];
  return out;
}

}  // namespace nsmae
