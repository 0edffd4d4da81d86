// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nsmae/tensor.hpp"

namespace nsmae {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Aabb {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();

  Vec3 size() const { return hi - lo; }
  bool contains(const Vec3& p, double eps = 0.0) const;
};

enum class ObjKind { Box, Sphere };

struct SceneObject {
  ObjKind kind = ObjKind::Box;
  Vec3 position = Vec3::Zero();  // center
  Vec3 extent = Vec3::Zero();    // box half-extents; spheres carry the radius in all three
  Vec3 color = Vec3::Zero();     // diffuse RGB in [0,1]

  Aabb bound() const { return {position - extent, position + extent}; }
};

struct Scene {
  std::vector<SceneObject> objects;
  Aabb world_bounds;
  uint64_t seed = 0;
};

/// Pinhole camera: pose is world<-camera with x right, y down, z forward.
struct CameraRig {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();  // camera origin in world space, meters
  double focal = 1.0;               // fx = fy, pixels
  double cx = 0.0, cy = 0.0;        // principal point, pixels
  int height = 0, width = 0;

  Mat3 intrinsics() const;
  /// Throws std::invalid_argument on a non-rigid rotation, non-positive
  /// focal, or a principal point outside the image.
  void validate() const;
  /// World-space unit direction through the center of pixel (row, col).
  Vec3 pixel_ray(int row, int col) const;
};

/// Camera on `origin` looking at `target`, world +z up, principal point at
/// the image center. Throws if the view direction is vertical.
CameraRig make_look_at_rig(const Vec3& origin, const Vec3& target, double focal, int height,
                           int width);

struct RayHit {
  bool hit = false;
  double distance = 0.0;  // 0 on a miss
  Vec3 color = Vec3::Zero();
  int object = -1;
};

struct PointXYZR {
  double x = 0.0, y = 0.0, z = 0.0, r = 0.0;
};

/// One camera's worth of paired supervision plus the shared Lidar sweep.
struct FramePair {
  Tensor image;     // [H,W,3] in [0,1]
  Tensor gt_depth;  // [H,W] ray distance in meters; exactly 0 where the ray hits nothing
  std::vector<PointXYZR> cloud;
  CameraRig rig;
};

struct RenderedView {
  Tensor image;  // [H,W,3]
  Tensor depth;  // [H,W]
};

struct VoxelGrid {
  Aabb range;
  Vec3 voxel_size = Vec3::Zero();
  int64_t nx = 0, ny = 0, nz = 0;  // ceil(range.size / voxel_size) per axis
  Tensor occupancy;                // [X,Y,Z] in {0,1}
  Tensor intensity;                // [X,Y,Z] mean point intensity, 0 where empty

  /// [X,Y,Z,2] with channel 0 = occupancy, channel 1 = mean intensity.
  Tensor features() const;
};

struct BevDepth {
  Tensor depth;  // [X,Y] meters measured down from the grid's top plane
  Tensor valid;  // [X,Y] in {0,1}; 0 marks columns with no occupied voxel
};

/// Deterministic in seed. Objects rest on the ground plane z = world_bounds.lo.z
/// and are pairwise separated; throws when the bounds cannot fit n_objects.
Scene generate_scene(uint64_t seed, int n_objects, const Aabb& world_bounds);

/// Nearest positive-distance hit. `dir` must be normalized; a miss is a valid
/// result (hit = false, distance = 0).
RayHit raycast(const Scene& scene, const Vec3& origin, const Vec3& dir);

/// One raycast per pixel center. Misses keep the sky color (0,0,0) and depth 0.
RenderedView render_gt_image(const Scene& scene, const CameraRig& rig);

/// One beam per cell of a uniform (azimuth, elevation) grid; misses produce no
/// point. Intensity is a deterministic function of the hit object's identity.
std::vector<PointXYZR> simulate_lidar(const Scene& scene, const Vec3& origin, int azimuth_count,
                                      int elevation_count);
double object_intensity(const Scene& scene, int object_index);

/// Points outside the range are dropped; occupied cells get mean intensity.
VoxelGrid voxelize(const std::vector<PointXYZR>& cloud, const Aabb& range, const Vec3& voxel_size);

/// Per (x,y) column: distance from the grid's top plane down to the center of
/// the highest occupied voxel; empty columns are marked invalid.
BevDepth gt_bev_depth(const VoxelGrid& grid);

// Structured-text fixture format, %.17g everywhere so round-trips are
// bit-exact.
std::string scene_to_text(const Scene& scene);
Scene scene_from_text(const std::string& text);
std::string frame_to_text(const FramePair& frame);
FramePair frame_from_text(const std::string& text);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace nsmae
