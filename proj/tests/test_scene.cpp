// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nsmae/scene.hpp"
#include "support/testers.hpp"

using namespace nsmae;
using nsmae::test::bits_equal;
using nsmae::test::expect_throw_contains;

namespace {

const Aabb kDeskBounds{Vec3(-8, -8, 0), Vec3(8, 8, 4)};

bool inside_any(const Scene& s, const Vec3& p) {
  for (const SceneObject& o : s.objects) {
    if (o.kind == ObjKind::Box) {
      if (o.bound().contains(p)) return true;
    } else if ((p - o.position).norm() <= o.extent.x()) {
      return true;
    }
  }
  return false;
}

// Independent intersection oracle: march 1e6 samples along the ray to find the
// first inside sample, then bisect the bracketing interval down to ~1e-12 m.
bool bisection_entry(const Scene& s, const Vec3& o, const Vec3& d, double t_max, double& t_out) {
  const int n = 1000000;
  const double dt = t_max / n;
  int first = -1;
  for (int k = 1; k <= n; ++k) {
    if (inside_any(s, o + (k * dt) * d)) {
      first = k;
      break;
    }
  }
  if (first < 0) return false;
  double lo = (first - 1) * dt, hi = first * dt;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (inside_any(s, o + mid * d) ? hi : lo) = mid;
  }
  t_out = 0.5 * (lo + hi);
  return true;
}

Scene one_object(SceneObject o) {
  Scene s;
  s.world_bounds = kDeskBounds;
  s.objects.push_back(o);
  return s;
}

SceneObject sphere_at(const Vec3& c, double r, const Vec3& color = Vec3(0.5, 0.5, 0.5)) {
  SceneObject o;
  o.kind = ObjKind::Sphere;
  o.position = c;
  o.extent = Vec3(r, r, r);
  o.color = color;
  return o;
}

SceneObject box_at(const Vec3& c, const Vec3& half, const Vec3& color = Vec3(0.5, 0.5, 0.5)) {
  SceneObject o;
  o.kind = ObjKind::Box;
  o.position = c;
  o.extent = half;
  o.color = color;
  return o;
}

}  // namespace

TEST_CASE("generate_scene is deterministic in seed") {
  const Scene a = generate_scene(7, 1, kDeskBounds);
  const Scene b = generate_scene(7, 1, kDeskBounds);
  CHECK(scene_to_text(a) == scene_to_text(b));
  const Scene c = generate_scene(8, 1, kDeskBounds);
  CHECK(scene_to_text(a) != scene_to_text(c));
}

TEST_CASE("generate_scene places exactly n objects inside the bounds") {
  const Scene s = generate_scene(3, 3, kDeskBounds);
  CHECK(s.objects.size() == 3);
  for (const SceneObject& o : s.objects) {
    const Aabb b = o.bound();
    CHECK(kDeskBounds.contains(b.lo));
    CHECK(kDeskBounds.contains(b.hi));
    CHECK(o.position.z() == b.lo.z() + o.extent.z());  // resting on the ground
    for (int c = 0; c < 3; ++c) {
      CHECK(o.color[c] >= 0.0);
      CHECK(o.color[c] <= 1.0);
    }
  }
  // pairwise separation
  for (size_t i = 0; i < s.objects.size(); ++i)
    for (size_t j = i + 1; j < s.objects.size(); ++j) {
      const Aabb a = s.objects[i].bound(), b = s.objects[j].bound();
      const bool apart_xy = a.hi.x() < b.lo.x() || b.hi.x() < a.lo.x() || a.hi.y() < b.lo.y() ||
                            b.hi.y() < a.lo.y();
      CHECK(apart_xy);
    }
}

TEST_CASE("generate_scene rejects bounds that cannot fit the request") {
  const Aabb tiny{Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)};
  expect_throw_contains<std::runtime_error>([&] { (void)generate_scene(1, 200, tiny); },
                                            "bounds too small");
  CHECK_THROWS_AS((void)generate_scene(1, 0, kDeskBounds), std::invalid_argument);
  CHECK_THROWS_AS((void)generate_scene(1, 1, Aabb{Vec3(0, 0, 0), Vec3(1, 1, 0)}),
                  std::invalid_argument);
}

TEST_CASE("raycast hits a unit sphere 5 m ahead at exactly 4") {
  const Scene s = one_object(sphere_at(Vec3(5, 0, 1), 1.0, Vec3(0.9, 0.1, 0.1)));
  const RayHit h = raycast(s, Vec3(0, 0, 1), Vec3(1, 0, 0));
  CHECK(h.hit);
  CHECK(h.distance == 4.0);
  CHECK(h.color.x() == 0.9);
  const RayHit miss = raycast(s, Vec3(0, 0, 1), Vec3(-1, 0, 0));
  CHECK(!miss.hit);
  CHECK(miss.distance == 0.0);
}

TEST_CASE("raycast agrees with the bisection oracle, including corner grazes") {
  const Scene s = one_object(box_at(Vec3(1.5, 1.5, 1.5), Vec3(0.5, 0.5, 0.5)));
  const Vec3 o(0, 0, 0);
  const std::vector<Vec3> aims = {
      {1.0, 1.0003, 1.0007},  // just inside the near corner
      {1.0, 1.2, 1.1},        // clean face hit
      {1.3, 1.0002, 1.9995},  // grazing the top edge region
      {2.0, 2.0, 2.0},        // aimed at the far corner
  };
  for (const Vec3& aim : aims) {
    const Vec3 d = aim.normalized();
    const RayHit h = raycast(s, o, d);
    double t_oracle = 0.0;
    const bool hit_oracle = bisection_entry(s, o, d, 6.0, t_oracle);
    REQUIRE(h.hit == hit_oracle);
    if (h.hit) CHECK(std::abs(h.distance - t_oracle) <= 1e-6);
  }
  // a ray that misses every object
  const Vec3 d_away = Vec3(-1.0, -0.2, 0.1).normalized();
  CHECK(!raycast(s, o, d_away).hit);
  double t_unused = 0.0;
  CHECK(!bisection_entry(s, o, d_away, 6.0, t_unused));
}

TEST_CASE("raycast agrees with the bisection oracle on spheres") {
  const Scene s = one_object(sphere_at(Vec3(3, -1, 1), 0.8));
  const Vec3 o(0, 0, 0.5);
  for (const Vec3& aim : std::vector<Vec3>{{3, -1, 1}, {3, -1.79, 1}, {3, -0.22, 1.05}}) {
    const Vec3 d = (aim - o).normalized();
    const RayHit h = raycast(s, o, d);
    double t_oracle = 0.0;
    const bool hit_oracle = bisection_entry(s, o, d, 8.0, t_oracle);
    REQUIRE(h.hit == hit_oracle);
    if (h.hit) CHECK(std::abs(h.distance - t_oracle) <= 1e-6);
  }
}

TEST_CASE("render_gt_image on an empty scene is sky everywhere") {
  Scene s;
  s.world_bounds = kDeskBounds;
  const CameraRig rig = make_look_at_rig(Vec3(-7, 0, 1.2), Vec3(0, 0, 0.6), 16.0, 8, 16);
  const RenderedView rv = render_gt_image(s, rig);
  for (double v : rv.image.data) CHECK(v == 0.0);
  for (double v : rv.depth.data) CHECK(v == 0.0);
}

TEST_CASE("a red box filling the view: flat color, plane-distance depths") {
  const Vec3 red(0.8, 0.1, 0.05);
  const Scene s = one_object(box_at(Vec3(10, 0, 0), Vec3(1, 30, 30), red));
  CameraRig rig;  // at the origin, camera z = world x
  rig.rotation.col(0) = Vec3(0, -1, 0);
  rig.rotation.col(1) = Vec3(0, 0, -1);
  rig.rotation.col(2) = Vec3(1, 0, 0);
  rig.translation = Vec3(0, 0, 0);
  rig.focal = 32.0;
  rig.cx = 32.0;
  rig.cy = 16.0;
  rig.height = 32;
  rig.width = 64;
  const RenderedView rv = render_gt_image(s, rig);
  for (int v = 0; v < 32; ++v)
    for (int u = 0; u < 64; ++u) {
      CHECK(rv.image.at({v, u, 0}) == red.x());
      const Vec3 d = rig.pixel_ray(v, u);
      // front face is the plane x = 9
      CHECK(rv.depth.at({v, u}) == doctest::Approx(9.0 / d.x()).epsilon(1e-12));
    }
}

TEST_CASE("depth at the principal point of a fronto-parallel plane at 10 m") {
  const Scene s = one_object(box_at(Vec3(0, 0, 11), Vec3(20, 20, 1)));
  CameraRig rig;  // identity pose: camera looks along world +z
  rig.focal = 32.0;
  rig.cx = 31.5;
  rig.cy = 15.5;
  rig.height = 32;
  rig.width = 64;
  const RenderedView rv = render_gt_image(s, rig);
  // pixel (15,31) center sits exactly on the principal point: an axial ray
  CHECK(rv.depth.at({15, 31}) == 10.0);
}

TEST_CASE("render depth and raycast distance are bit-equal") {
  const Scene s = generate_scene(21, 3, kDeskBounds);
  const CameraRig rig = make_look_at_rig(Vec3(-7, 2, 1.4), Vec3(0, 0, 0.5), 32.0, 32, 64);
  const RenderedView rv = render_gt_image(s, rig);
  bool any_hit = false;
  for (int v = 0; v < rig.height; ++v)
    for (int u = 0; u < rig.width; ++u) {
      const RayHit h = raycast(s, rig.translation, rig.pixel_ray(v, u));
      CHECK(rv.depth.at({v, u}) == h.distance);
      any_hit = any_hit || h.hit;
    }
  CHECK(any_hit);
}

TEST_CASE("camera rig validation") {
  CameraRig rig = make_look_at_rig(Vec3(-5, 0, 1), Vec3(0, 0, 0.5), 32.0, 32, 64);
  CHECK(rig.intrinsics()(0, 0) == 32.0);
  CHECK(rig.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
  rig.focal = -1.0;
  CHECK_THROWS_AS(rig.validate(), std::invalid_argument);
  rig.focal = 32.0;
  rig.cx = 999.0;
  expect_throw_contains<std::invalid_argument>([&] { rig.validate(); }, "principal point");
  rig.cx = 32.0;
  rig.rotation(0, 0) = 2.0;
  expect_throw_contains<std::invalid_argument>([&] { rig.validate(); }, "orthonormal");
  CHECK_THROWS_AS(make_look_at_rig(Vec3(0, 0, 5), Vec3(0, 0, 0), 32.0, 32, 64),
                  std::invalid_argument);
}

TEST_CASE("simulate_lidar basics") {
  Scene empty;
  empty.world_bounds = kDeskBounds;
  CHECK(simulate_lidar(empty, Vec3(0, 0, 1), 16, 8).empty());

  const Vec3 c(3, 1, 0.5);
  const Vec3 origin(0, 0, 0.5);
  const Scene s = one_object(sphere_at(c, 0.5));
  const std::vector<PointXYZR> pts = simulate_lidar(s, origin, 64, 32);
  CHECK(!pts.empty());
  CHECK(pts.size() <= 64u * 32u);
  const double center_dist = (c - origin).norm();
  for (const PointXYZR& p : pts) {
    const double d = (Vec3(p.x, p.y, p.z) - origin).norm();
    CHECK(std::abs(d - center_dist) <= 0.5 + 1e-9);
    CHECK(p.r == object_intensity(s, 0));
  }
  CHECK_THROWS_AS(simulate_lidar(s, origin, 0, 4), std::invalid_argument);
}

TEST_CASE("lidar points re-raycast to their own distances") {
  const Scene s = generate_scene(5, 3, kDeskBounds);
  const Vec3 origin(0, 0, 1.2);
  const std::vector<PointXYZR> pts = simulate_lidar(s, origin, 48, 16);
  REQUIRE(!pts.empty());
  for (const PointXYZR& p : pts) {
    const Vec3 q(p.x, p.y, p.z);
    CHECK(s.world_bounds.contains(q, 1e-9));
    const RayHit h = raycast(s, origin, (q - origin).normalized());
    REQUIRE(h.hit);
    CHECK(std::abs(h.distance - (q - origin).norm()) <= 1e-9);
  }
}

TEST_CASE("voxelize basics") {
  const Aabb range = kDeskBounds;
  const Vec3 vs(0.25, 0.25, 0.25);
  const VoxelGrid empty = voxelize({}, range, vs);
  CHECK(empty.nx == 64);
  CHECK(empty.ny == 64);
  CHECK(empty.nz == 16);
  for (double v : empty.occupancy.data) CHECK(v == 0.0);

  // one point at the range center -> exactly one occupied voxel
  const VoxelGrid one = voxelize({{0.0, 0.0, 2.0, 0.7}}, range, vs);
  double occ_sum = 0.0;
  for (double v : one.occupancy.data) occ_sum += v;
  CHECK(occ_sum == 1.0);
  CHECK(one.occupancy.at({32, 32, 8}) == 1.0);
  CHECK(one.intensity.at({32, 32, 8}) == 0.7);

  // two points sharing a cell average their intensities
  const VoxelGrid two = voxelize({{0.0, 0.0, 2.0, 0.2}, {0.1, 0.05, 2.1, 0.4}}, range, vs);
  CHECK(two.intensity.at({32, 32, 8}) == doctest::Approx(0.3).epsilon(1e-12));

  // out-of-range points are dropped
  const VoxelGrid out = voxelize({{100.0, 0.0, 2.0, 0.5}, {0.0, 0.0, -1.0, 0.5}}, range, vs);
  for (double v : out.occupancy.data) CHECK(v == 0.0);

  CHECK_THROWS_AS(voxelize({}, range, Vec3(0.25, 0.0, 0.25)), std::invalid_argument);

  const Tensor f = one.features();
  CHECK(f.shape == Shape{64, 64, 16, 2});
  CHECK(f.at({32, 32, 8, 0}) == 1.0);
  CHECK(f.at({32, 32, 8, 1}) == 0.7);
}

TEST_CASE("every lidar point lands in an occupied voxel") {
  const Scene s = generate_scene(9, 4, kDeskBounds);
  const std::vector<PointXYZR> pts = simulate_lidar(s, Vec3(0, 0, 1.2), 48, 16);
  REQUIRE(!pts.empty());
  const VoxelGrid g = voxelize(pts, kDeskBounds, Vec3(0.25, 0.25, 0.25));
  int64_t occupied = 0;
  for (double v : g.occupancy.data) occupied += v == 1.0 ? 1 : 0;
  CHECK(occupied >= 1);
  CHECK(occupied <= static_cast<int64_t>(pts.size()));
  for (const PointXYZR& p : pts) {
    const int64_t ix = static_cast<int64_t>(std::floor((p.x - kDeskBounds.lo.x()) / 0.25));
    const int64_t iy = static_cast<int64_t>(std::floor((p.y - kDeskBounds.lo.y()) / 0.25));
    const int64_t iz = static_cast<int64_t>(std::floor((p.z - kDeskBounds.lo.z()) / 0.25));
    REQUIRE(ix >= 0);
    REQUIRE(ix < g.nx);
    CHECK(g.occupancy.at({ix, iy, iz}) == 1.0);
  }
}

TEST_CASE("gt_bev_depth measures down from the grid top") {
  const Aabb range = kDeskBounds;
  const Vec3 vs(0.25, 0.25, 0.25);

  const BevDepth none = gt_bev_depth(voxelize({}, range, vs));
  for (double v : none.valid.data) CHECK(v == 0.0);

  // top-layer voxel: depth is half a voxel
  const BevDepth top = gt_bev_depth(voxelize({{0.0, 0.0, 3.9, 0.5}}, range, vs));
  CHECK(top.valid.at({32, 32}) == 1.0);
  CHECK(top.depth.at({32, 32}) == 0.125);

  // stacked voxels: the higher one wins
  const BevDepth stacked =
      gt_bev_depth(voxelize({{0.0, 0.0, 0.1, 0.5}, {0.0, 0.0, 2.05, 0.5}}, range, vs));
  CHECK(stacked.valid.at({32, 32}) == 1.0);
  CHECK(stacked.depth.at({32, 32}) == (16 - 8 - 0.5) * 0.25);
  CHECK(stacked.valid.at({0, 0}) == 0.0);
}

TEST_CASE("scene and frame fixtures round-trip bit-exactly") {
  const Scene s = generate_scene(33, 3, kDeskBounds);
  const std::string text = scene_to_text(s);
  const Scene back = scene_from_text(text);
  CHECK(scene_to_text(back) == text);
  CHECK(back.seed == 33);
  CHECK(back.objects.size() == 3);

  const CameraRig rig = make_look_at_rig(Vec3(-7, 1, 1.4), Vec3(0, 0, 0.5), 32.0, 8, 16);
  const RenderedView rv = render_gt_image(s, rig);
  FramePair f;
  f.image = rv.image;
  f.gt_depth = rv.depth;
  f.cloud = simulate_lidar(s, Vec3(0, 0, 1.2), 24, 8);
  f.rig = rig;
  const std::string ft = frame_to_text(f);
  const FramePair fb = frame_from_text(ft);
  CHECK(bits_equal(fb.image, f.image));
  CHECK(bits_equal(fb.gt_depth, f.gt_depth));
  REQUIRE(fb.cloud.size() == f.cloud.size());
  for (size_t i = 0; i < f.cloud.size(); ++i) {
    CHECK(fb.cloud[i].x == f.cloud[i].x);
    CHECK(fb.cloud[i].r == f.cloud[i].r);
  }
  CHECK(fb.rig.rotation == f.rig.rotation);
  CHECK(fb.rig.translation == f.rig.translation);
  CHECK(frame_to_text(fb) == ft);

  expect_throw_contains<std::runtime_error>([&] { (void)scene_from_text("bogus 1\n"); },
                                            "expected");
}
