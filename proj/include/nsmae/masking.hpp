// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nsmae/graph.hpp"
#include "nsmae/tensor.hpp"

namespace nsmae {

struct ImageMaskSpec {
  int patch_size = 4;
  double ratio = 0.5;
  uint64_t seed = 0;
};

struct MaskedImage {
  Var image;    // [H,W,3]: masked patches carry the token, the rest the input
  Tensor mask;  // [H,W] in {0,1}, constant within each patch
};

struct MaskedVoxels {
  Tensor features;                        // [X,Y,Z,2] with masked cells zeroed
  std::vector<int64_t> masked_index_set;  // ascending flat indices into X*Y*Z
};

/// Patch-constant binary mask with exactly round(ratio * #patches) patches
/// set, chosen uniformly without replacement. Deterministic in (seed, shape).
Tensor make_patch_mask(int64_t height, int64_t width, const ImageMaskSpec& spec);

/// Replaces the selected patches of `image` with the learnable token. The
/// gradient reaches mask_token only through masked positions.
MaskedImage mask_image(Var image, const ImageMaskSpec& spec, Var mask_token);

/// Zeroes the features of round(ratio * #non-empty) uniformly chosen non-empty
/// cells of a [X,Y,Z,2] feature grid (channel 0 = occupancy). Empty cells are
/// untouched.
MaskedVoxels mask_voxels(const Tensor& features, double ratio, uint64_t seed);
struct VoxelGrid;
MaskedVoxels mask_voxels(const VoxelGrid& grid, double ratio, uint64_t seed);

/// Fresh [s,s,3] token, uniform in [-0.02, 0.02].
Tensor init_mask_token(int patch_size, uint64_t seed);

/// Dumps a {0,1} mask as a 16-bit PGM (masked = white) for inspection.
void write_mask_pgm(const std::string& path, const Tensor& mask);

}  // namespace nsmae
