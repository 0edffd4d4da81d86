// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>

#include "nsmae/tensor.hpp"

namespace nsmae {

/// Binary PPM (P6, maxval 255). `image` is [H,W,3] with values clamped to
/// [0,1] and rounded to the nearest 8-bit level.
void write_ppm(const std::string& path, const Tensor& image);
/// Reads a P6 file back to [H,W,3] in [0,1].
Tensor read_ppm(const std::string& path);

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples). `depth` is [H,W]
/// in meters; each sample stores round(depth / meters_per_unit), clamped, and
/// the scale is recorded in a "# meters_per_unit:" header comment.
void write_pgm16(const std::string& path, const Tensor& depth, double meters_per_unit);
/// Reads a P5 file written by write_pgm16; returns meters and the scale.
std::pair<Tensor, double> read_pgm16(const std::string& path);

}  // namespace nsmae
