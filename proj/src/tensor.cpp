// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace nsmae {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  int64_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t;
  int64_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(n), value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data.assign(1, value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(values);
  return t;
}

int64_t Tensor::index_of(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank())
    throw std::invalid_argument("index rank " + std::to_string(idx.size()) +
                                " vs tensor shape " + shape_str(shape));
  int64_t flat = 0;
  int d = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= shape[static_cast<size_t>(d)])
      throw std::out_of_range("index " + std::to_string(i) + " out of range for axis " +
                              std::to_string(d) + " of shape " + shape_str(shape));
    flat = flat * shape[static_cast<size_t>(d)] + i;
    ++d;
  }
  return flat;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = ra > rb ? ra : rb;
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t ea = i < ra ? a[ra - 1 - i] : 1;
    int64_t eb = i < rb ? b[rb - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    out[r - 1 - i] = ea == 1 ? eb : ea;
  }
  return out;
}

}  // namespace nsmae
