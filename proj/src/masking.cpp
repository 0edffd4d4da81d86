// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nsmae/image_io.hpp"
#include "nsmae/rng.hpp"
#include "nsmae/scene.hpp"

namespace nsmae {

namespace {

// First k entries of a seeded partial Fisher-Yates over [0, n).
std::vector<int64_t> choose_without_replacement(int64_t n, int64_t k, uint64_t seed) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), int64_t{0});
  Rng rng(seed);
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(k));
  return idx;
}

}  // namespace

Tensor make_patch_mask(int64_t height, int64_t width, const ImageMaskSpec& spec) {
  if (spec.patch_size < 1)
    throw std::invalid_argument("make_patch_mask: patch_size must be >= 1");
  if (!(spec.ratio >= 0.0 && spec.ratio <= 1.0))
    throw std::invalid_argument("make_patch_mask: ratio must lie in [0,1]");
  const int64_t s = spec.patch_size;
  if (height < s || width < s || height % s != 0 || width % s != 0)
    throw std::invalid_argument("make_patch_mask: image " + std::to_string(height) + "x" +
                                std::to_string(width) + " is not divisible by patch size " +
                                std::to_string(s));
  const int64_t ph = height / s, pw = width / s;
  const int64_t n = ph * pw;
  const int64_t k = std::llround(spec.ratio * static_cast<double>(n));
  Tensor mask = Tensor::zeros({height, width});
  for (int64_t patch : choose_without_replacement(n, k, spec.seed)) {
    const int64_t py = patch / pw, px = patch % pw;
    for (int64_t y = py * s; y < (py + 1) * s; ++y)
      for (int64_t x = px * s; x < (px + 1) * s; ++x)
        mask.data[static_cast<size_t>(y * width + x)] = 1.0;
  }
  return mask;
}

MaskedImage mask_image(Var image, const ImageMaskSpec& spec, Var mask_token) {
  const Tensor& ti = image.value();
  if (ti.rank() != 3 || ti.shape[2] != 3)
    throw std::invalid_argument("mask_image: want image [H,W,3], got " + shape_str(ti.shape));
  Tensor mask = make_patch_mask(ti.shape[0], ti.shape[1], spec);
  Var out = apply_mask_token(image, mask_token, mask);
  return {out, std::move(mask)};
}

MaskedVoxels mask_voxels(const Tensor& features, double ratio, uint64_t seed) {
  if (features.rank() != 4 || features.shape[3] != 2)
    throw std::invalid_argument("mask_voxels: want features [X,Y,Z,2], got " +
                                shape_str(features.shape));
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw std::invalid_argument("mask_voxels: ratio must lie in [0,1]");
  const int64_t cells = features.numel() / 2;
  std::vector<int64_t> non_empty;
  for (int64_t i = 0; i < cells; ++i)
    if (features.data[static_cast<size_t>(2 * i)] != 0.0) non_empty.push_back(i);
  const int64_t k =
      std::llround(ratio * static_cast<double>(non_empty.size()));
  MaskedVoxels mv;
  mv.features = features;
  std::vector<int64_t> picks =
      choose_without_replacement(static_cast<int64_t>(non_empty.size()), k, seed);
  mv.masked_index_set.reserve(picks.size());
  for (int64_t p : picks) mv.masked_index_set.push_back(non_empty[static_cast<size_t>(p)]);
  std::sort(mv.masked_index_set.begin(), mv.masked_index_set.end());
  for (int64_t cell : mv.masked_index_set) {
    mv.features.data[static_cast<size_t>(2 * cell)] = 0.0;
    mv.features.data[static_cast<size_t>(2 * cell + 1)] = 0.0;
  }
  return mv;
}

MaskedVoxels mask_voxels(const VoxelGrid& grid, double ratio, uint64_t seed) {
  return mask_voxels(grid.features(), ratio, seed);
}

Tensor init_mask_token(int patch_size, uint64_t seed) {
  if (patch_size < 1) throw std::invalid_argument("init_mask_token: patch_size must be >= 1");
  Tensor t = Tensor::zeros({patch_size, patch_size, 3});
  Rng rng(seed);
  for (double& v : t.data) v = rng.uniform(-0.02, 0.02);
  return t;
}

void write_mask_pgm(const std::string& path, const Tensor& mask) {
  write_pgm16(path, mask, 1.0 / 65535.0);
}

}  // namespace nsmae
