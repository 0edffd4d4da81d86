// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/scene.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "nsmae/rng.hpp"

namespace nsmae {

namespace {

constexpr double kTMin = 1e-9;

bool ray_box(const Vec3& o, const Vec3& d, const Aabb& b, double& t_out) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-300) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return false;
      continue;
    }
    const double inv = 1.0 / d[a];
    double ta = (b.lo[a] - o[a]) * inv;
    double tb = (b.hi[a] - o[a]) * inv;
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) t0 = ta;
    if (tb < t1) t1 = tb;
    if (t1 < t0) return false;
  }
  const double t = t0 > kTMin ? t0 : t1;  // t1 when the origin is inside
  if (t <= kTMin) return false;
  t_out = t;
  return true;
}

bool ray_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r, double& t_out) {
  const Vec3 oc = o - c;
  const double b = d.dot(oc);
  const double c0 = oc.squaredNorm() - r * r;
  const double disc = b * b - c0;
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= kTMin) t = -b + sq;
  if (t <= kTMin) return false;
  t_out = t;
  return true;
}

}  // namespace

bool Aabb::contains(const Vec3& p, double eps) const {
  for (int a = 0; a < 3; ++a)
    if (p[a] < lo[a] - eps || p[a] > hi[a] + eps) return false;
  return true;
}

Mat3 CameraRig::intrinsics() const {
  Mat3 k = Mat3::Zero();
  k(0, 0) = focal;
  k(1, 1) = focal;
  k(0, 2) = cx;
  k(1, 2) = cy;
  k(2, 2) = 1.0;
  return k;
}

void CameraRig::validate() const {
  if (!(focal > 0.0)) throw std::invalid_argument("CameraRig: focal must be > 0");
  if (height < 1 || width < 1) throw std::invalid_argument("CameraRig: empty image plane");
  if (!(cx > 0.0) || !(cx < width) || !(cy > 0.0) || !(cy < height))
    throw std::invalid_argument("CameraRig: principal point outside the image");
  const Mat3 rtr = rotation.transpose() * rotation;
  if ((rtr - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(rotation.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("CameraRig: rotation must be orthonormal with det +1");
}

Vec3 CameraRig::pixel_ray(int row, int col) const {
  const Vec3 d((col + 0.5 - cx) / focal, (row + 0.5 - cy) / focal, 1.0);
  return rotation * d.normalized();
}

CameraRig make_look_at_rig(const Vec3& origin, const Vec3& target, double focal, int height,
                           int width) {
  const Vec3 fwd = target - origin;
  if (fwd.norm() < 1e-12)
    throw std::invalid_argument("make_look_at_rig: origin and target coincide");
  const Vec3 z = fwd.normalized();
  Vec3 x = z.cross(Vec3(0, 0, 1));
  if (x.norm() < 1e-9) throw std::invalid_argument("make_look_at_rig: view direction is vertical");
  x.normalize();
  const Vec3 y = z.cross(x);
  CameraRig rig;
  rig.rotation.col(0) = x;
  rig.rotation.col(1) = y;
  rig.rotation.col(2) = z;
  rig.translation = origin;
  rig.focal = focal;
  rig.cx = width / 2.0;
  rig.cy = height / 2.0;
  rig.height = height;
  rig.width = width;
  rig.validate();
  return rig;
}

Scene generate_scene(uint64_t seed, int n_objects, const Aabb& wb) {
  if (n_objects < 1) throw std::invalid_argument("generate_scene: n_objects must be >= 1");
  const Vec3 s = wb.size();
  if (!(s.x() > 0.0 && s.y() > 0.0 && s.z() > 0.0))
    throw std::invalid_argument("generate_scene: world_bounds must be non-degenerate");
  Scene scene;
  scene.world_bounds = wb;
  scene.seed = seed;
  Rng rng(seed);
  const double margin = 0.05;
  const int max_attempts = 200 * n_objects + 200;
  int attempts = 0;
  while (static_cast<int>(scene.objects.size()) < n_objects) {
    if (++attempts > max_attempts)
      throw std::runtime_error("generate_scene: bounds too small to place " +
                               std::to_string(n_objects) + " objects");
    SceneObject o;
    o.kind = (rng.next_u64() & 1) ? ObjKind::Sphere : ObjKind::Box;
    if (o.kind == ObjKind::Box) {
      for (int a = 0; a < 3; ++a) o.extent[a] = rng.uniform(0.05, 0.15) * s[a];
    } else {
      const double r = rng.uniform(0.05, 0.12) * s.minCoeff();
      o.extent = Vec3(r, r, r);
    }
    o.position.x() = rng.uniform(wb.lo.x() + o.extent.x(), wb.hi.x() - o.extent.x());
    o.position.y() = rng.uniform(wb.lo.y() + o.extent.y(), wb.hi.y() - o.extent.y());
    o.position.z() = wb.lo.z() + o.extent.z();  // resting on the ground plane
    for (int c = 0; c < 3; ++c) o.color[c] = rng.uniform(0.15, 0.95);
    const Aabb nb = o.bound();
    bool clash = false;
    for (const SceneObject& e : scene.objects) {
      const Aabb eb = e.bound();
      const bool apart = nb.hi.x() + margin < eb.lo.x() || eb.hi.x() + margin < nb.lo.x() ||
                         nb.hi.y() + margin < eb.lo.y() || eb.hi.y() + margin < nb.lo.y() ||
                         nb.hi.z() + margin < eb.lo.z() || eb.hi.z() + margin < nb.lo.z();
      if (!apart) {
        clash = true;
        break;
      }
    }
    if (!clash) scene.objects.push_back(o);
  }
  return scene;
}

RayHit raycast(const Scene& scene, const Vec3& origin, const Vec3& dir) {
  RayHit best;
  double nearest = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& ob = scene.objects[i];
    double t = 0.0;
    const bool h = ob.kind == ObjKind::Box
                       ? ray_box(origin, dir, ob.bound(), t)
                       : ray_sphere(origin, dir, ob.position, ob.extent.x(), t);
    if (h && t < nearest) {
      nearest = t;
      best.hit = true;
      best.distance = t;
      best.color = ob.color;
      best.object = static_cast<int>(i);
    }
  }
  return best;
}

RenderedView render_gt_image(const Scene& scene, const CameraRig& rig) {
  rig.validate();
  RenderedView rv;
  rv.image = Tensor::zeros({rig.height, rig.width, 3});
  rv.depth = Tensor::zeros({rig.height, rig.width});
  for (int v = 0; v < rig.height; ++v)
    for (int u = 0; u < rig.width; ++u) {
      const RayHit h = raycast(scene, rig.translation, rig.pixel_ray(v, u));
      if (!h.hit) continue;  // sky: color (0,0,0), depth 0
      for (int c = 0; c < 3; ++c) rv.image.at({v, u, c}) = h.color[c];
      rv.depth.at({v, u}) = h.distance;
    }
  return rv;
}

double object_intensity(const Scene& scene, int object_index) {
  Rng h(scene.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(object_index + 1)));
  return 0.1 + 0.8 * h.uniform();
}

std::vector<PointXYZR> simulate_lidar(const Scene& scene, const Vec3& origin, int azimuth_count,
                                      int elevation_count) {
  if (azimuth_count < 1 || elevation_count < 1)
    throw std::invalid_argument("simulate_lidar: counts must be >= 1");
  constexpr double kPi = std::numbers::pi;
  constexpr double kElMin = -0.55, kElMax = 0.25;  // radians
  std::vector<PointXYZR> out;
  out.reserve(static_cast<size_t>(azimuth_count) * static_cast<size_t>(elevation_count));
  for (int e = 0; e < elevation_count; ++e) {
    const double phi = kElMin + (e + 0.5) * (kElMax - kElMin) / elevation_count;
    for (int a = 0; a < azimuth_count; ++a) {
      const double theta = -kPi + (a + 0.5) * 2.0 * kPi / azimuth_count;
      const Vec3 d(std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta),
                   std::sin(phi));
      const RayHit h = raycast(scene, origin, d);
      if (!h.hit) continue;
      const Vec3 p = origin + h.distance * d;
      out.push_back({p.x(), p.y(), p.z(), object_intensity(scene, h.object)});
    }
  }
  return out;
}

VoxelGrid voxelize(const std::vector<PointXYZR>& cloud, const Aabb& range,
                   const Vec3& voxel_size) {
  if (!(voxel_size.x() > 0.0 && voxel_size.y() > 0.0 && voxel_size.z() > 0.0))
    throw std::invalid_argument("voxelize: voxel_size must be > 0 per axis");
  VoxelGrid g;
  g.range = range;
  g.voxel_size = voxel_size;
  g.nx = static_cast<int64_t>(std::ceil(range.size().x() / voxel_size.x()));
  g.ny = static_cast<int64_t>(std::ceil(range.size().y() / voxel_size.y()));
  g.nz = static_cast<int64_t>(std::ceil(range.size().z() / voxel_size.z()));
  g.occupancy = Tensor::zeros({g.nx, g.ny, g.nz});
  g.intensity = Tensor::zeros({g.nx, g.ny, g.nz});
  std::vector<int64_t> count(static_cast<size_t>(g.nx * g.ny * g.nz), 0);
  for (const PointXYZR& p : cloud) {
    const int64_t ix = static_cast<int64_t>(std::floor((p.x - range.lo.x()) / voxel_size.x()));
    const int64_t iy = static_cast<int64_t>(std::floor((p.y - range.lo.y()) / voxel_size.y()));
    const int64_t iz = static_cast<int64_t>(std::floor((p.z - range.lo.z()) / voxel_size.z()));
    if (ix < 0 || ix >= g.nx || iy < 0 || iy >= g.ny || iz < 0 || iz >= g.nz) continue;
    const size_t flat = static_cast<size_t>((ix * g.ny + iy) * g.nz + iz);
    g.occupancy.data[flat] = 1.0;
    g.intensity.data[flat] += p.r;
    ++count[flat];
  }
  for (size_t i = 0; i < count.size(); ++i)
    if (count[i] > 0) g.intensity.data[i] /= static_cast<double>(count[i]);
  return g;
}

Tensor VoxelGrid::features() const {
  Tensor f = Tensor::zeros({nx, ny, nz, 2});
  const int64_t cells = nx * ny * nz;
  for (int64_t i = 0; i < cells; ++i) {
    f.data[static_cast<size_t>(2 * i)] = occupancy.data[static_cast<size_t>(i)];
    f.data[static_cast<size_t>(2 * i + 1)] = intensity.data[static_cast<size_t>(i)];
  }
  return f;
}

BevDepth gt_bev_depth(const VoxelGrid& g) {
  BevDepth bd;
  bd.depth = Tensor::zeros({g.nx, g.ny});
  bd.valid = Tensor::zeros({g.nx, g.ny});
  for (int64_t ix = 0; ix < g.nx; ++ix)
    for (int64_t iy = 0; iy < g.ny; ++iy) {
      for (int64_t iz = g.nz - 1; iz >= 0; --iz) {
        if (g.occupancy.at({ix, iy, iz}) == 0.0) continue;
        bd.depth.at({ix, iy}) = (static_cast<double>(g.nz - iz) - 0.5) * g.voxel_size.z();
        bd.valid.at({ix, iy}) = 1.0;
        break;
      }
    }
  return bd;
}

// ---------------------------------------------------------------------------
// Structured-text fixtures
// ---------------------------------------------------------------------------

namespace {

std::string d2s(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void expect_word(std::istringstream& in, const char* want, const char* what) {
  std::string w;
  if (!(in >> w) || w != want)
    throw std::runtime_error(std::string(what) + ": expected '" + want + "', got '" + w + "'");
}

double read_d(std::istringstream& in, const char* what) {
  double v = 0.0;
  if (!(in >> v)) throw std::runtime_error(std::string(what) + ": truncated numeric field");
  return v;
}

int64_t read_i(std::istringstream& in, const char* what) {
  int64_t v = 0;
  if (!(in >> v)) throw std::runtime_error(std::string(what) + ": truncated integer field");
  return v;
}

void put_vec3(std::ostringstream& os, const Vec3& v) {
  os << d2s(v.x()) << ' ' << d2s(v.y()) << ' ' << d2s(v.z());
}

Vec3 get_vec3(std::istringstream& in, const char* what) {
  Vec3 v;
  for (int a = 0; a < 3; ++a) v[a] = read_d(in, what);
  return v;
}

}  // namespace

std::string scene_to_text(const Scene& scene) {
  std::ostringstream os;
  os << "nsmae-scene 1\n";
  os << "seed " << scene.seed << "\n";
  os << "bounds ";
  put_vec3(os, scene.world_bounds.lo);
  os << ' ';
  put_vec3(os, scene.world_bounds.hi);
  os << "\nobjects " << scene.objects.size() << "\n";
  for (const SceneObject& o : scene.objects) {
    os << (o.kind == ObjKind::Box ? "box " : "sphere ");
    put_vec3(os, o.position);
    os << ' ';
    put_vec3(os, o.extent);
    os << ' ';
    put_vec3(os, o.color);
    os << "\n";
  }
  return os.str();
}

Scene scene_from_text(const std::string& text) {
  std::istringstream in(text);
  expect_word(in, "nsmae-scene", "scene_from_text");
  if (read_i(in, "scene_from_text") != 1)
    throw std::runtime_error("scene_from_text: unsupported version");
  Scene scene;
  expect_word(in, "seed", "scene_from_text");
  if (!(in >> scene.seed)) throw std::runtime_error("scene_from_text: bad seed");
  expect_word(in, "bounds", "scene_from_text");
  scene.world_bounds.lo = get_vec3(in, "scene_from_text");
  scene.world_bounds.hi = get_vec3(in, "scene_from_text");
  expect_word(in, "objects", "scene_from_text");
  const int64_t n = read_i(in, "scene_from_text");
  for (int64_t i = 0; i < n; ++i) {
    std::string kind;
    if (!(in >> kind)) throw std::runtime_error("scene_from_text: truncated object list");
    SceneObject o;
    if (kind == "box")
      o.kind = ObjKind::Box;
    else if (kind == "sphere")
      o.kind = ObjKind::Sphere;
    else
      throw std::runtime_error("scene_from_text: unknown object kind '" + kind + "'");
    o.position = get_vec3(in, "scene_from_text");
    o.extent = get_vec3(in, "scene_from_text");
    o.color = get_vec3(in, "scene_from_text");
    scene.objects.push_back(o);
  }
  return scene;
}

std::string frame_to_text(const FramePair& frame) {
  std::ostringstream os;
  os << "nsmae-frame 1\n";
  os << "rig " << d2s(frame.rig.focal) << ' ' << d2s(frame.rig.cx) << ' ' << d2s(frame.rig.cy)
     << ' ' << frame.rig.height << ' ' << frame.rig.width << "\n";
  os << "rot";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) os << ' ' << d2s(frame.rig.rotation(r, c));
  os << "\ntrans ";
  put_vec3(os, frame.rig.translation);
  os << "\nimage " << frame.image.shape[0] << ' ' << frame.image.shape[1] << "\n";
  for (size_t i = 0; i < frame.image.data.size(); ++i)
    os << d2s(frame.image.data[i]) << (i + 1 == frame.image.data.size() ? '\n' : ' ');
  os << "depth " << frame.gt_depth.shape[0] << ' ' << frame.gt_depth.shape[1] << "\n";
  for (size_t i = 0; i < frame.gt_depth.data.size(); ++i)
    os << d2s(frame.gt_depth.data[i]) << (i + 1 == frame.gt_depth.data.size() ? '\n' : ' ');
  os << "cloud " << frame.cloud.size() << "\n";
  for (const PointXYZR& p : frame.cloud)
    os << d2s(p.x) << ' ' << d2s(p.y) << ' ' << d2s(p.z) << ' ' << d2s(p.r) << "\n";
  return os.str();
}

FramePair frame_from_text(const std::string& text) {
  std::istringstream in(text);
  expect_word(in, "nsmae-frame", "frame_from_text");
  if (read_i(in, "frame_from_text") != 1)
    throw std::runtime_error("frame_from_text: unsupported version");
  FramePair f;
  expect_word(in, "rig", "frame_from_text");
  f.rig.focal = read_d(in, "frame_from_text");
  f.rig.cx = read_d(in, "frame_from_text");
  f.rig.cy = read_d(in, "frame_from_text");
  f.rig.height = static_cast<int>(read_i(in, "frame_from_text"));
  f.rig.width = static_cast<int>(read_i(in, "frame_from_text"));
  expect_word(in, "rot", "frame_from_text");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) f.rig.rotation(r, c) = read_d(in, "frame_from_text");
  expect_word(in, "trans", "frame_from_text");
  f.rig.translation = get_vec3(in, "frame_from_text");
  expect_word(in, "image", "frame_from_text");
  const int64_t h = read_i(in, "frame_from_text");
  const int64_t w = read_i(in, "frame_from_text");
  f.image = Tensor::zeros({h, w, 3});
  for (double& v : f.image.data) v = read_d(in, "frame_from_text");
  expect_word(in, "depth", "frame_from_text");
  const int64_t dh = read_i(in, "frame_from_text");
  const int64_t dw = read_i(in, "frame_from_text");
  f.gt_depth = Tensor::zeros({dh, dw});
  for (double& v : f.gt_depth.data) v = read_d(in, "frame_from_text");
  expect_word(in, "cloud", "frame_from_text");
  const int64_t n = read_i(in, "frame_from_text");
  f.cloud.resize(static_cast<size_t>(n));
  for (PointXYZR& p : f.cloud) {
    p.x = read_d(in, "frame_from_text");
    p.y = read_d(in, "frame_from_text");
    p.z = read_d(in, "frame_from_text");
    p.r = read_d(in, "frame_from_text");
  }
  return f;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_text_file: cannot open " + path);
  out << text;
  if (!out) throw std::runtime_error("write_text_file: write failed for " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_text_file: cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace nsmae
