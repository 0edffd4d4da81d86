// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "nsmae/tensor.hpp"

namespace nsmae {

class Graph;

/// Handle to a graph node. Cheap to copy; invalidated by Graph::clear().
/// References returned by value()/shape() stay valid while nodes are appended
/// (node storage is a deque), but not across Graph::clear().
struct Var {
  Graph* graph = nullptr;
  int32_t id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const;
};

/// Define-by-run reverse-mode tape over f64 tensors.
///
/// Nodes are appended in construction order, which is already a topological
/// order; backward() walks the tape once in reverse. The graph owns every
/// forward value and gradient buffer and is rebuilt from scratch each training
/// step. Construction and backward are single-threaded; parallelism lives
/// inside the kernels an op invokes, over disjoint output regions, so results
/// are bit-identical across thread counts.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input. Gradient available after backward().
  Var leaf(Tensor value);
  /// Non-differentiable input (data, targets, masks).
  Var constant(Tensor value);

  /// Reverse pass from a scalar-shaped loss. A second call without clear()
  /// is rejected, as is a loss living on another graph.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  const Tensor& value(Var v) const;
  /// Gradient from the last backward(). Throws if backward has not run or no
  /// gradient reached v.
  const Tensor& grad(Var v) const;
  bool has_grad(Var v) const;

  size_t size() const { return nodes_.size(); }
  void clear();

  /// When enabled, every forward value and gradient is scanned for non-finite
  /// entries; violations throw with the op name and flat coordinate.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  struct Node {
    const char* op = "";
    std::array<int32_t, 3> in{{-1, -1, -1}};
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::function<void(Graph&, int32_t)> backward_fn;
  };

  /// Appends a node. requires_grad is inherited from the inputs.
  Var make(const char* op, std::initializer_list<Var> inputs, Tensor value,
           std::function<void(Graph&, int32_t)> backward_fn);
  Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  /// Adds g into the gradient buffer of node id (no-op for non-differentiable
  /// nodes). Called serially in reverse tape order, so accumulation order is
  /// fixed.
  void accumulate(int32_t id, Tensor g);

 private:
  // Deque, not vector: append must not invalidate references handed out by
  // value()/shape() while callers are still building ops.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
  bool check_finite_ = false;
};

// ---- Elementwise ops (binary ops use trailing-dimension broadcasting) ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var vpow(Var a, Var b);
Var neg(Var a);
Var vexp(Var a);
Var vabs(Var a);
Var softplus(Var a);
Var sigmoid(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

/// a * s for a plain scalar s.
Var scale(Var a, double s);
/// a + s for a plain scalar s.
Var shift(Var a, double s);
/// Elementwise a^p with a fixed exponent.
Var vpow(Var a, double p);
/// a / b, realized as mul(a, vpow(b, -1)).
Var div(Var a, Var b);

// ---- Reductions and scans ----
Var sum(Var a);
Var sum(Var a, int axis, bool keepdim = false);
Var mean(Var a);
Var mean(Var a, int axis, bool keepdim = false);
/// out[..., k, ...] = sum of a[..., j, ...] over j < k along axis; out[0] = 0.
Var exclusive_prefix_sum(Var a, int axis);

// ---- Shape ops ----
Var reshape(Var a, Shape shape);
Var slice(Var a, int axis, int64_t start, int64_t len);
Var concat(Var a, Var b, int axis);
Var flip(Var a, int axis);
/// Generalized transpose: out dimension i takes input dimension dims[i].
Var permute(Var a, std::vector<int> dims);

// ---- Linear layers ----
/// x [..., c_in] @ w [c_in, c_out] + b [c_out].
Var affine(Var x, Var w, Var b);
/// Channels-last convolution: x [h, w, c_in] or [batch, h, w, c_in],
/// k [k_h, k_w, c_in, c_out], symmetric zero padding. No bias term; compose
/// one with add() if needed.
Var conv2d(Var x, Var k, int stride, int pad);

// ---- Structured data movement ----
/// out[v, c] = sum over rows m with routing[m] == v of feat[m, c].
/// routing values lie in [-1, n_cells); -1 drops the row. Deterministic
/// ascending-m accumulation.
Var scatter_rows(Var feat, std::shared_ptr<const std::vector<int64_t>> routing,
                 int64_t n_cells);
/// Replaces pixels of image [h,w,3] with token [s,s,3] (tiled per patch)
/// wherever the {0,1} patch-constant mask [h,w] is 1. Gradient flows into
/// token through masked positions and into image through unmasked ones.
Var apply_mask_token(Var image, Var token, const Tensor& mask);

// ---- Composites of the ops above ----
/// Numerically stable softmax along axis. The max shift uses detached forward
/// values; softmax is shift-invariant, so the gradient is unaffected.
Var softmax(Var a, int axis);

}  // namespace nsmae
