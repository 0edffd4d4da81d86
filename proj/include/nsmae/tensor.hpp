// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace nsmae {

/// Extents of a dense row-major tensor. Empty shape = rank-0 scalar.
using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);
std::vector<int64_t> strides_of(const Shape& s);

/// Dense row-major f64 tensor. Data lives in a flat vector; shape carries the
/// extents. All model state, activations and gradients use this type.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  /// Scalar-shaped: exactly one element (rank 0 or all-ones extents).
  bool is_scalar() const { return data.size() == 1; }

  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }

  /// Row-major flat offset of a full coordinate. Bounds-checked.
  int64_t index_of(std::initializer_list<int64_t> idx) const;
  double at(std::initializer_list<int64_t> idx) const { return data[static_cast<size_t>(index_of(idx))]; }
  double& at(std::initializer_list<int64_t> idx) { return data[static_cast<size_t>(index_of(idx))]; }
};

bool same_shape(const Shape& a, const Shape& b);

/// Result shape of trailing-dimension (numpy-style) broadcasting.
/// Throws std::invalid_argument naming both shapes if they are incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace nsmae
