// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/graph.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "nsmae/kernels.hpp"

namespace nsmae {

namespace {

using kernels::Binary;
using kernels::Unary;

void throw_op(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

Graph* require_graph(const char* op, std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (Var v : vars) {
    if (!v.valid()) throw_op(op, "invalid Var handle");
    if (g == nullptr) g = v.graph;
    if (v.graph != g) throw_op(op, "inputs live on different graphs");
  }
  return g;
}

Shape broadcast_or_throw(const char* op, const Shape& a, const Shape& b) {
  try {
    return broadcast_shape(a, b);
  } catch (const std::invalid_argument&) {
    throw_op(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  return {};
}

int check_axis(const char* op, const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw_op(op, "axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return axis;
}

// outer/extent/inner view of a shape around one axis
struct AxisView {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  v.extent = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

// Walks every coordinate of `out` in ascending flat order, maintaining the
// matching (broadcast) flat offsets into a and b.
template <typename F>
void for_each_bcast(const Shape& out, const Shape& ash, const Shape& bsh, F&& fn) {
  const int r = static_cast<int>(out.size());
  std::vector<int64_t> sa(static_cast<size_t>(r), 0), sb(static_cast<size_t>(r), 0);
  const auto fill = [r](const Shape& s, std::vector<int64_t>& dst) {
    const std::vector<int64_t> st = strides_of(s);
    const int off = r - static_cast<int>(s.size());
    for (size_t i = 0; i < s.size(); ++i) dst[static_cast<size_t>(off) + i] = s[i] == 1 ? 0 : st[i];
  };
  fill(ash, sa);
  fill(bsh, sb);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t ia = 0, ib = 0;
  const int64_t n = shape_numel(out);
  for (int64_t io = 0; io < n; ++io) {
    fn(io, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      ++idx[du];
      ia += sa[du];
      ib += sb[du];
      if (idx[du] < out[du]) break;
      ia -= sa[du] * out[du];
      ib -= sb[du] * out[du];
      idx[du] = 0;
    }
  }
}

// Sums g down to a broadcast-compatible target shape.
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape == target) return g;
  Tensor out = Tensor::zeros(target);
  for_each_bcast(g.shape, target, target,
                 [&](int64_t io, int64_t ia, int64_t) { out.data[static_cast<size_t>(ia)] += g.data[static_cast<size_t>(io)]; });
  return out;
}

void check_finite_tensor(const char* op, const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.data[static_cast<size_t>(i)]))
      throw std::domain_error(std::string(op) + ": non-finite value at flat coordinate " +
                              std::to_string(i));
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph core
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return graph->value(*this); }
const Shape& Var::shape() const { return graph->value(*this).shape; }

Var Graph::leaf(Tensor value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Graph::make(const char* op, std::initializer_list<Var> inputs, Tensor value,
                std::function<void(Graph&, int32_t)> backward_fn) {
  Node n;
  n.op = op;
  int slot = 0;
  bool rg = false;
  for (Var v : inputs) {
    n.in[static_cast<size_t>(slot++)] = v.id;
    rg = rg || nodes_[static_cast<size_t>(v.id)].requires_grad;
  }
  if (check_finite_) check_finite_tensor(op, value);
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

void Graph::accumulate(int32_t id, Tensor g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) return;
  if (check_finite_) check_finite_tensor(n.op, g);
  if (g.shape != n.value.shape)
    throw std::logic_error(std::string(n.op) + ": gradient shape " + shape_str(g.shape) +
                           " vs value shape " + shape_str(n.value.shape));
  if (n.grad.data.empty()) {
    n.grad = std::move(g);
    return;
  }
  double* dst = n.grad.data.data();
  const double* src = g.data.data();
  const int64_t m = n.grad.numel();
#pragma omp parallel for schedule(static) if (m > 8192)
  for (int64_t i = 0; i < m; ++i) dst[i] += src[i];
}

void Graph::backward(Var loss) {
  if (loss.graph != this || loss.id < 0 || loss.id >= static_cast<int32_t>(nodes_.size()))
    throw std::invalid_argument("backward: loss is not a node of this graph");
  if (backward_done_)
    throw std::logic_error("backward: already run on this graph; rebuild or clear() first");
  Node& ln = nodes_[static_cast<size_t>(loss.id)];
  if (!ln.value.is_scalar())
    throw std::invalid_argument("backward: loss must be scalar-shaped, got " +
                                shape_str(ln.value.shape));
  backward_done_ = true;
  if (!ln.requires_grad) return;
  ln.grad = Tensor::full(ln.value.shape, 1.0);
  for (int32_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || n.grad.data.empty() || !n.backward_fn) continue;
    n.backward_fn(*this, i);
  }
}

const Tensor& Graph::value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

bool Graph::has_grad(Var v) const {
  return backward_done_ && v.graph == this && v.id >= 0 &&
         !nodes_[static_cast<size_t>(v.id)].grad.data.empty();
}

const Tensor& Graph::grad(Var v) const {
  if (!backward_done_) throw std::logic_error("grad: backward has not run");
  if (v.graph != this) throw std::invalid_argument("grad: Var from another graph");
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad.data.empty())
    throw std::logic_error(std::string("grad: no gradient reached node (op ") + n.op + ")");
  return n.grad;
}

void Graph::clear() {
  nodes_.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

Var unary_op(const char* name, Unary op, Var a) {
  Graph* g = require_graph(name, {a});
  const Tensor& ta = a.value();
  Tensor out;
  out.shape = ta.shape;
  out.data.resize(ta.data.size());
  kernels::unary_map(op, ta.data.data(), out.data.data(), ta.numel());
  return g->make(name, {a}, std::move(out), [op](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    const int64_t m = n.value.numel();
    Tensor da;
    da.shape = na.value.shape;
    da.data.resize(static_cast<size_t>(m));
    const double* x = na.value.data.data();
    const double* y = n.value.data.data();
    const double* go = n.grad.data.data();
    double* d = da.data.data();
    switch (op) {
      case Unary::Neg:
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = -go[i];
        break;
      case Unary::Exp:
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = go[i] * y[i];
        break;
      case Unary::Abs:
        // subgradient 0 at the tie x == 0
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = x[i] > 0.0 ? go[i] : (x[i] < 0.0 ? -go[i] : 0.0);
        break;
      case Unary::Softplus:
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i)
          d[i] = go[i] * kernels::unary_apply(Unary::Sigmoid, x[i]);
        break;
      case Unary::Sigmoid:
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = go[i] * y[i] * (1.0 - y[i]);
        break;
    }
    gr.accumulate(n.in[0], std::move(da));
  });
}

Var binary_op(const char* name, Binary op, Var a, Var b) {
  Graph* g = require_graph(name, {a, b});
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  const Shape os = broadcast_or_throw(name, ta.shape, tb.shape);
  Tensor out;
  out.shape = os;
  out.data.resize(static_cast<size_t>(shape_numel(os)));
  const int64_t n = out.numel();
  if (ta.shape == tb.shape) {
    kernels::binary_same(op, ta.data.data(), tb.data.data(), out.data.data(), n);
  } else if (tb.is_scalar()) {
    const double bv = tb.data[0];
    const double* x = ta.data.data();
    double* y = out.data.data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) y[i] = kernels::binary_apply(op, x[i], bv);
  } else if (ta.is_scalar()) {
    const double av = ta.data[0];
    const double* x = tb.data.data();
    double* y = out.data.data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) y[i] = kernels::binary_apply(op, av, x[i]);
  } else {
    for_each_bcast(os, ta.shape, tb.shape, [&](int64_t io, int64_t ia, int64_t ib) {
      out.data[static_cast<size_t>(io)] =
          kernels::binary_apply(op, ta.data[static_cast<size_t>(ia)], tb.data[static_cast<size_t>(ib)]);
    });
  }
  return g->make(name, {a, b}, std::move(out), [op](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    const Graph::Node& nb = gr.node(n.in[1]);
    const Tensor& ta = na.value;
    const Tensor& tb = nb.value;
    const Tensor& go = n.grad;
    const bool same = ta.shape == tb.shape;
    const int64_t m = go.numel();
    if (na.requires_grad) {
      Tensor da = Tensor::zeros(ta.shape);
      double* d = da.data.data();
      const double* gp = go.data.data();
      const double* bp = tb.data.data();
      if (same && (op == Binary::Add || op == Binary::Sub)) {
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = gp[i];
      } else if (same && op == Binary::Mul) {
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = gp[i] * bp[i];
      } else {
        for_each_bcast(go.shape, ta.shape, tb.shape, [&](int64_t io, int64_t ia, int64_t ib) {
          const double gv = go.data[static_cast<size_t>(io)];
          double f = 0.0;
          switch (op) {
            case Binary::Add:
            case Binary::Sub:
              f = 1.0;
              break;
            case Binary::Mul:
              f = tb.data[static_cast<size_t>(ib)];
              break;
            case Binary::Pow: {
              const double av = ta.data[static_cast<size_t>(ia)];
              const double bv = tb.data[static_cast<size_t>(ib)];
              f = bv * std::pow(av, bv - 1.0);
              break;
            }
          }
          da.data[static_cast<size_t>(ia)] += gv * f;
        });
      }
      gr.accumulate(n.in[0], std::move(da));
    }
    if (nb.requires_grad) {
      Tensor db = Tensor::zeros(tb.shape);
      double* d = db.data.data();
      const double* gp = go.data.data();
      const double* ap = ta.data.data();
      if (same && op == Binary::Add) {
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = gp[i];
      } else if (same && op == Binary::Sub) {
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = -gp[i];
      } else if (same && op == Binary::Mul) {
#pragma omp parallel for schedule(static) if (m > 8192)
        for (int64_t i = 0; i < m; ++i) d[i] = gp[i] * ap[i];
      } else {
        const double* yv = n.value.data.data();
        for_each_bcast(go.shape, ta.shape, tb.shape, [&](int64_t io, int64_t ia, int64_t ib) {
          const double gv = go.data[static_cast<size_t>(io)];
          double f = 0.0;
          switch (op) {
            case Binary::Add:
              f = 1.0;
              break;
            case Binary::Sub:
              f = -1.0;
              break;
            case Binary::Mul:
              f = ta.data[static_cast<size_t>(ia)];
              break;
            case Binary::Pow: {
              const double av = ta.data[static_cast<size_t>(ia)];
              f = av == 0.0 ? 0.0 : yv[io] * std::log(av);
              break;
            }
          }
          db.data[static_cast<size_t>(ib)] += gv * f;
        });
      }
      gr.accumulate(n.in[1], std::move(db));
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return binary_op("add", Binary::Add, a, b); }
Var sub(Var a, Var b) { return binary_op("subtract", Binary::Sub, a, b); }
Var mul(Var a, Var b) { return binary_op("multiply", Binary::Mul, a, b); }
Var vpow(Var a, Var b) { return binary_op("power", Binary::Pow, a, b); }
Var neg(Var a) { return unary_op("negate", Unary::Neg, a); }
Var vexp(Var a) { return unary_op("exponential", Unary::Exp, a); }
Var vabs(Var a) { return unary_op("absolute-value", Unary::Abs, a); }
Var softplus(Var a) { return unary_op("softplus", Unary::Softplus, a); }
Var sigmoid(Var a) { return unary_op("sigmoid", Unary::Sigmoid, a); }

Var scale(Var a, double s) {
  Graph* g = require_graph("scale", {a});
  return mul(a, g->constant(Tensor::scalar(s)));
}

Var shift(Var a, double s) {
  Graph* g = require_graph("shift", {a});
  return add(a, g->constant(Tensor::scalar(s)));
}

Var vpow(Var a, double p) {
  Graph* g = require_graph("power", {a});
  return vpow(a, g->constant(Tensor::scalar(p)));
}

Var div(Var a, Var b) { return mul(a, vpow(b, -1.0)); }

// ---------------------------------------------------------------------------
// Reductions and scans
// ---------------------------------------------------------------------------

Var sum(Var a) {
  Graph* g = require_graph("sum", {a});
  const Tensor& ta = a.value();
  Tensor out = Tensor::scalar(kernels::reduce_sum_all(ta.data.data(), ta.numel()));
  return g->make("sum", {a}, std::move(out), [](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    gr.accumulate(n.in[0], Tensor::full(na.value.shape, n.grad.data[0]));
  });
}

Var sum(Var a, int axis, bool keepdim) {
  Graph* g = require_graph("sum", {a});
  const Tensor& ta = a.value();
  check_axis("sum", ta.shape, axis);
  const AxisView v = axis_view(ta.shape, axis);
  Shape os = ta.shape;
  if (keepdim)
    os[static_cast<size_t>(axis)] = 1;
  else
    os.erase(os.begin() + axis);
  Tensor out;
  out.shape = std::move(os);
  out.data.resize(static_cast<size_t>(v.outer * v.inner));
  kernels::reduce_sum_axis(ta.data.data(), out.data.data(), v.outer, v.extent, v.inner);
  return g->make("sum", {a}, std::move(out), [v](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    Tensor da;
    da.shape = na.value.shape;
    da.data.resize(na.value.data.size());
    const double* go = n.grad.data.data();
    double* d = da.data.data();
#pragma omp parallel for schedule(static) if (v.outer > 8)
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t k = 0; k < v.extent; ++k)
        for (int64_t i = 0; i < v.inner; ++i)
          d[(o * v.extent + k) * v.inner + i] = go[o * v.inner + i];
    gr.accumulate(n.in[0], std::move(da));
  });
}

Var mean(Var a) {
  const int64_t n = a.value().numel();
  return scale(sum(a), n > 0 ? 1.0 / static_cast<double>(n) : 0.0);
}

Var mean(Var a, int axis, bool keepdim) {
  check_axis("mean", a.value().shape, axis);
  const int64_t n = a.value().shape[static_cast<size_t>(axis)];
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Var exclusive_prefix_sum(Var a, int axis) {
  Graph* g = require_graph("exclusive_prefix_sum", {a});
  const Tensor& ta = a.value();
  check_axis("exclusive_prefix_sum", ta.shape, axis);
  const AxisView v = axis_view(ta.shape, axis);
  Tensor out;
  out.shape = ta.shape;
  out.data.resize(ta.data.size());
  kernels::exclusive_scan(ta.data.data(), out.data.data(), v.outer, v.extent, v.inner);
  return g->make("exclusive_prefix_sum", {a}, std::move(out), [v](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    Tensor da;
    da.shape = na.value.shape;
    da.data.resize(na.value.data.size());
    kernels::exclusive_scan_adjoint(n.grad.data.data(), da.data.data(), v.outer, v.extent,
                                    v.inner);
    gr.accumulate(n.in[0], std::move(da));
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Var reshape(Var a, Shape shape) {
  Graph* g = require_graph("reshape", {a});
  const Tensor& ta = a.value();
  if (shape_numel(shape) != ta.numel())
    throw_op("reshape", "cannot view " + shape_str(ta.shape) + " as " + shape_str(shape));
  Tensor out;
  out.shape = std::move(shape);
  out.data = ta.data;
  return g->make("reshape", {a}, std::move(out), [](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    Tensor da;
    da.shape = na.value.shape;
    da.data = n.grad.data;
    gr.accumulate(n.in[0], std::move(da));
  });
}

Var slice(Var a, int axis, int64_t start, int64_t len) {
  Graph* g = require_graph("slice", {a});
  const Tensor& ta = a.value();
  check_axis("slice", ta.shape, axis);
  const int64_t extent = ta.shape[static_cast<size_t>(axis)];
  if (start < 0 || len < 1 || start + len > extent)
    throw_op("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                          ") outside axis extent " + std::to_string(extent));
  const AxisView v = axis_view(ta.shape, axis);
  Shape os = ta.shape;
  os[static_cast<size_t>(axis)] = len;
  Tensor out;
  out.shape = std::move(os);
  out.data.resize(static_cast<size_t>(v.outer * len * v.inner));
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t k = 0; k < len; ++k)
      for (int64_t i = 0; i < v.inner; ++i)
        out.data[static_cast<size_t>((o * len + k) * v.inner + i)] =
            ta.data[static_cast<size_t>((o * v.extent + start + k) * v.inner + i)];
  return g->make("slice", {a}, std::move(out), [v, start, len](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    Tensor da = Tensor::zeros(na.value.shape);
    const double* go = n.grad.data.data();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t k = 0; k < len; ++k)
        for (int64_t i = 0; i < v.inner; ++i)
          da.data[static_cast<size_t>((o * v.extent + start + k) * v.inner + i)] =
              go[(o * len + k) * v.inner + i];
    gr.accumulate(n.in[0], std::move(da));
  });
}

Var concat(Var a, Var b, int axis) {
  Graph* g = require_graph("concat", {a, b});
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  if (ta.rank() != tb.rank())
    throw_op("concat", "rank mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  check_axis("concat", ta.shape, axis);
  for (int i = 0; i < ta.rank(); ++i)
    if (i != axis && ta.shape[static_cast<size_t>(i)] != tb.shape[static_cast<size_t>(i)])
      throw_op("concat", "extent mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape) +
                             " on axis " + std::to_string(i));
  const AxisView va = axis_view(ta.shape, axis);
  const int64_t eb = tb.shape[static_cast<size_t>(axis)];
  Shape os = ta.shape;
  os[static_cast<size_t>(axis)] = va.extent + eb;
  Tensor out;
  out.shape = std::move(os);
  out.data.resize(ta.data.size() + tb.data.size());
  const int64_t rowa = va.extent * va.inner, rowb = eb * va.inner, rowo = rowa + rowb;
  double* op_ = out.data.data();
  const double* ap = ta.data.data();
  const double* bp = tb.data.data();
#pragma omp parallel for schedule(static) if (va.outer > 64)
  for (int64_t o = 0; o < va.outer; ++o) {
    for (int64_t i = 0; i < rowa; ++i) op_[o * rowo + i] = ap[o * rowa + i];
    for (int64_t i = 0; i < rowb; ++i) op_[o * rowo + rowa + i] = bp[o * rowb + i];
  }
  return g->make("concat", {a, b}, std::move(out), [va, eb](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const int64_t rowa = va.extent * va.inner, rowb = eb * va.inner, rowo = rowa + rowb;
    const double* go = n.grad.data.data();
    for (int slot = 0; slot < 2; ++slot) {
      const Graph::Node& ni = gr.node(n.in[static_cast<size_t>(slot)]);
      if (!ni.requires_grad) continue;
      Tensor d;
      d.shape = ni.value.shape;
      d.data.resize(ni.value.data.size());
      const int64_t row = slot == 0 ? rowa : rowb;
      const int64_t off = slot == 0 ? 0 : rowa;
      double* dp = d.data.data();
#pragma omp parallel for schedule(static) if (va.outer > 64)
      for (int64_t o = 0; o < va.outer; ++o)
        for (int64_t i = 0; i < row; ++i) dp[o * row + i] = go[o * rowo + off + i];
      gr.accumulate(n.in[static_cast<size_t>(slot)], std::move(d));
    }
  });
}

Var flip(Var a, int axis) {
  Graph* g = require_graph("flip", {a});
  const Tensor& ta = a.value();
  check_axis("flip", ta.shape, axis);
  const AxisView v = axis_view(ta.shape, axis);
  Tensor out;
  out.shape = ta.shape;
  out.data.resize(ta.data.size());
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t k = 0; k < v.extent; ++k)
      for (int64_t i = 0; i < v.inner; ++i)
        out.data[static_cast<size_t>((o * v.extent + k) * v.inner + i)] =
            ta.data[static_cast<size_t>((o * v.extent + (v.extent - 1 - k)) * v.inner + i)];
  return g->make("flip", {a}, std::move(out), [v](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    Tensor da;
    da.shape = na.value.shape;
    da.data.resize(na.value.data.size());
    const double* go = n.grad.data.data();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t k = 0; k < v.extent; ++k)
        for (int64_t i = 0; i < v.inner; ++i)
          da.data[static_cast<size_t>((o * v.extent + k) * v.inner + i)] =
              go[(o * v.extent + (v.extent - 1 - k)) * v.inner + i];
    gr.accumulate(n.in[0], std::move(da));
  });
}

namespace {

// out[idx] = in[perm(idx)] copy for permute and its adjoint
Tensor permute_copy(const Tensor& in, const std::vector<int>& dims) {
  const int r = in.rank();
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = in.shape[static_cast<size_t>(dims[static_cast<size_t>(i)])];
  const std::vector<int64_t> ist = strides_of(in.shape);
  std::vector<int64_t> st(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) st[static_cast<size_t>(i)] = ist[static_cast<size_t>(dims[static_cast<size_t>(i)])];
  Tensor out;
  out.shape = os;
  out.data.resize(in.data.size());
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t src = 0;
  const int64_t n = in.numel();
  for (int64_t io = 0; io < n; ++io) {
    out.data[static_cast<size_t>(io)] = in.data[static_cast<size_t>(src)];
    for (int d = r - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      ++idx[du];
      src += st[du];
      if (idx[du] < os[du]) break;
      src -= st[du] * os[du];
      idx[du] = 0;
    }
  }
  return out;
}

}  // namespace

Var permute(Var a, std::vector<int> dims) {
  Graph* g = require_graph("permute", {a});
  const Tensor& ta = a.value();
  const int r = ta.rank();
  if (static_cast<int>(dims.size()) != r)
    throw_op("permute", "got " + std::to_string(dims.size()) + " dims for rank " + std::to_string(r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int d : dims) {
    if (d < 0 || d >= r || seen[static_cast<size_t>(d)])
      throw_op("permute", "dims must be a permutation of 0.." + std::to_string(r - 1));
    seen[static_cast<size_t>(d)] = true;
  }
  Tensor out = permute_copy(ta, dims);
  std::vector<int> inv(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) inv[static_cast<size_t>(dims[static_cast<size_t>(i)])] = i;
  return g->make("permute", {a}, std::move(out), [inv](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& na = gr.node(n.in[0]);
    if (!na.requires_grad) return;
    gr.accumulate(n.in[0], permute_copy(n.grad, inv));
  });
}

// ---------------------------------------------------------------------------
// Linear layers
// ---------------------------------------------------------------------------

Var affine(Var x, Var w, Var b) {
  Graph* g = require_graph("affine", {x, w, b});
  const Tensor& tx = x.value();
  const Tensor& tw = w.value();
  const Tensor& tb = b.value();
  if (tx.rank() < 1 || tw.rank() != 2 || tb.rank() != 1)
    throw_op("affine", "want x [..., c_in], w [c_in, c_out], b [c_out]; got " +
                           shape_str(tx.shape) + ", " + shape_str(tw.shape) + ", " +
                           shape_str(tb.shape));
  const int64_t c_in = tx.shape.back();
  const int64_t c_out = tw.shape[1];
  if (tw.shape[0] != c_in || tb.shape[0] != c_out)
    throw_op("affine", "incompatible shapes x " + shape_str(tx.shape) + ", w " +
                           shape_str(tw.shape) + ", b " + shape_str(tb.shape));
  const int64_t m = tx.numel() / c_in;
  Shape os = tx.shape;
  os.back() = c_out;
  Tensor out;
  out.shape = std::move(os);
  out.data.resize(static_cast<size_t>(m * c_out));
  kernels::affine_forward(tx.data.data(), tw.data.data(), tb.data.data(), out.data.data(), m,
                          c_in, c_out);
  return g->make("affine", {x, w, b}, std::move(out), [m, c_in, c_out](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& nx = gr.node(n.in[0]);
    const Graph::Node& nw = gr.node(n.in[1]);
    const Graph::Node& nb = gr.node(n.in[2]);
    const double* go = n.grad.data.data();
    if (nx.requires_grad) {
      Tensor dx;
      dx.shape = nx.value.shape;
      dx.data.resize(nx.value.data.size());
      kernels::affine_backward_x(go, nw.value.data.data(), dx.data.data(), m, c_in, c_out);
      gr.accumulate(n.in[0], std::move(dx));
    }
    if (nw.requires_grad) {
      Tensor dw;
      dw.shape = nw.value.shape;
      dw.data.resize(nw.value.data.size());
      kernels::affine_backward_w(nx.value.data.data(), go, dw.data.data(), m, c_in, c_out);
      gr.accumulate(n.in[1], std::move(dw));
    }
    if (nb.requires_grad) {
      Tensor db;
      db.shape = nb.value.shape;
      db.data.resize(nb.value.data.size());
      kernels::affine_backward_b(go, db.data.data(), m, c_out);
      gr.accumulate(n.in[2], std::move(db));
    }
  });
}

Var conv2d(Var x, Var k, int stride, int pad) {
  Graph* g = require_graph("conv2d", {x, k});
  const Tensor& tx = x.value();
  const Tensor& tk = k.value();
  if ((tx.rank() != 3 && tx.rank() != 4) || tk.rank() != 4)
    throw_op("conv2d", "want x [h,w,c] or [batch,h,w,c] and k [kh,kw,c_in,c_out]; got " +
                           shape_str(tx.shape) + ", " + shape_str(tk.shape));
  const bool batched = tx.rank() == 4;
  const int64_t batch = batched ? tx.shape[0] : 1;
  const int64_t in_h = tx.shape[batched ? 1 : 0];
  const int64_t in_w = tx.shape[batched ? 2 : 1];
  const int64_t c_in = tx.shape[batched ? 3 : 2];
  if (tk.shape[2] != c_in)
    throw_op("conv2d", "kernel c_in " + std::to_string(tk.shape[2]) + " vs input channels " +
                           std::to_string(c_in));
  const kernels::Conv2dDims d = kernels::conv2d_dims(batch, in_h, in_w, c_in, tk.shape[0],
                                                     tk.shape[1], tk.shape[3], stride, pad);
  Shape os = batched ? Shape{batch, d.out_h, d.out_w, d.c_out} : Shape{d.out_h, d.out_w, d.c_out};
  Tensor out;
  out.shape = std::move(os);
  out.data.resize(static_cast<size_t>(batch * d.out_h * d.out_w * d.c_out));
  const std::vector<double> zero_bias(static_cast<size_t>(d.c_out), 0.0);
  kernels::conv2d_forward(tx.data.data(), tk.data.data(), zero_bias.data(), out.data.data(), d);
  return g->make("conv2d", {x, k}, std::move(out), [d](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& nx = gr.node(n.in[0]);
    const Graph::Node& nk = gr.node(n.in[1]);
    const double* go = n.grad.data.data();
    if (nx.requires_grad) {
      Tensor dx;
      dx.shape = nx.value.shape;
      dx.data.resize(nx.value.data.size());
      kernels::conv2d_backward_x(go, nk.value.data.data(), dx.data.data(), d);
      gr.accumulate(n.in[0], std::move(dx));
    }
    if (nk.requires_grad) {
      Tensor dk;
      dk.shape = nk.value.shape;
      dk.data.resize(nk.value.data.size());
      kernels::conv2d_backward_k(nx.value.data.data(), go, dk.data.data(), d);
      gr.accumulate(n.in[1], std::move(dk));
    }
  });
}

// ---------------------------------------------------------------------------
// Structured data movement
// ---------------------------------------------------------------------------

Var scatter_rows(Var feat, std::shared_ptr<const std::vector<int64_t>> routing,
                 int64_t n_cells) {
  Graph* g = require_graph("scatter_rows", {feat});
  const Tensor& tf = feat.value();
  if (tf.rank() != 2) throw_op("scatter_rows", "want feat [rows, c]; got " + shape_str(tf.shape));
  const int64_t m = tf.shape[0], c = tf.shape[1];
  if (!routing || static_cast<int64_t>(routing->size()) != m)
    throw_op("scatter_rows", "routing size does not match row count " + std::to_string(m));
  for (int64_t v : *routing)
    if (v < -1 || v >= n_cells)
      throw_op("scatter_rows", "routing value " + std::to_string(v) + " outside [-1, " +
                                   std::to_string(n_cells) + ")");
  Tensor out = Tensor::zeros({n_cells, c});
  // ascending-row accumulation: deterministic regardless of thread count
  for (int64_t r = 0; r < m; ++r) {
    const int64_t v = (*routing)[static_cast<size_t>(r)];
    if (v < 0) continue;
    const double* src = tf.data.data() + r * c;
    double* dst = out.data.data() + v * c;
    for (int64_t i = 0; i < c; ++i) dst[i] += src[i];
  }
  return g->make("scatter_rows", {feat}, std::move(out), [routing, m, c](Graph& gr, int32_t self) {
    const Graph::Node& n = gr.node(self);
    const Graph::Node& nf = gr.node(n.in[0]);
    if (!nf.requires_grad) return;
    Tensor df;
    df.shape = nf.value.shape;
    df.data.resize(nf.value.data.size());
    kernels::gather_rows(n.grad.data.data(), routing->data(), df.data.data(), m, c);
    gr.accumulate(n.in[0], std::move(df));
  });
}

Var apply_mask_token(Var image, Var token, const Tensor& mask) {
  Graph* g = require_graph("apply_mask_token", {image, token});
  const Tensor& ti = image.value();
  const Tensor& tt = token.value();
  if (ti.rank() != 3 || ti.shape[2] != 3 || tt.rank() != 3 || tt.shape[2] != 3 ||
      tt.shape[0] != tt.shape[1])
    throw_op("apply_mask_token", "want image [h,w,3] and token [s,s,3]; got " +
                                     shape_str(ti.shape) + ", " + shape_str(tt.shape));
  const int64_t h = ti.shape[0], w = ti.shape[1], s = tt.shape[0];
  if (mask.shape != Shape{h, w})
    throw_op("apply_mask_token", "mask shape " + shape_str(mask.shape) + " vs image " +
                                     shape_str(ti.shape));
  if (h % s != 0 || w % s != 0)
    throw_op("apply_mask_token", "token size " + std::to_string(s) +
                                     " does not divide image extents " + shape_str(ti.shape));
  for (double v : mask.data)
    if (v != 0.0 && v != 1.0) throw_op("apply_mask_token", "mask must be binary");
  Tensor out = ti;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (mask.data[static_cast<size_t>(y * w + x)] == 0.0) continue;
      const double* tok = tt.data.data() + ((y % s) * s + x % s) * 3;
      double* px = out.data.data() + (y * w + x) * 3;
      px[0] = tok[0];
      px[1] = tok[1];
      px[2] = tok[2];
    }
  auto mask_copy = std::make_shared<const Tensor>(mask);
  return g->make("apply_mask_token", {image, token}, std::move(out),
                 [mask_copy, h, w, s](Graph& gr, int32_t self) {
                   const Graph::Node& n = gr.node(self);
                   const Graph::Node& ni = gr.node(n.in[0]);
                   const Graph::Node& nt = gr.node(n.in[1]);
                   const double* go = n.grad.data.data();
                   const double* mk = mask_copy->data.data();
                   if (nt.requires_grad) {
                     Tensor dt = Tensor::zeros(nt.value.shape);
                     for (int64_t y = 0; y < h; ++y)
                       for (int64_t x = 0; x < w; ++x) {
                         if (mk[y * w + x] == 0.0) continue;
                         double* d = dt.data.data() + ((y % s) * s + x % s) * 3;
                         const double* gp = go + (y * w + x) * 3;
                         d[0] += gp[0];
                         d[1] += gp[1];
                         d[2] += gp[2];
                       }
                     gr.accumulate(n.in[1], std::move(dt));
                   }
                   if (ni.requires_grad) {
                     Tensor di = Tensor::zeros(ni.value.shape);
                     for (int64_t y = 0; y < h; ++y)
                       for (int64_t x = 0; x < w; ++x) {
                         if (mk[y * w + x] != 0.0) continue;
                         double* d = di.data.data() + (y * w + x) * 3;
                         const double* gp = go + (y * w + x) * 3;
                         d[0] = gp[0];
                         d[1] = gp[1];
                         d[2] = gp[2];
                       }
                     gr.accumulate(n.in[0], std::move(di));
                   }
                 });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

Var softmax(Var a, int axis) {
  Graph* g = require_graph("softmax", {a});
  const Tensor& ta = a.value();
  check_axis("softmax", ta.shape, axis);
  const AxisView v = axis_view(ta.shape, axis);
  Shape ms = ta.shape;
  ms[static_cast<size_t>(axis)] = 1;
  Tensor m = Tensor::zeros(ms);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t i = 0; i < v.inner; ++i) {
      double best = ta.data[static_cast<size_t>(o * v.extent * v.inner + i)];
      for (int64_t k = 1; k < v.extent; ++k) {
        const double x = ta.data[static_cast<size_t>((o * v.extent + k) * v.inner + i)];
        if (x > best) best = x;
      }
      m.data[static_cast<size_t>(o * v.inner + i)] = best;
    }
  const Var e = vexp(sub(a, g->constant(std::move(m))));
  const Var s = sum(e, axis, true);
  return mul(e, vpow(s, -1.0));
}

}  // namespace nsmae
