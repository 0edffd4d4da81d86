// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/grad_check.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace nsmae {

namespace {

double require_scalar(const Var& loss) {
  const Tensor& v = loss.value();
  if (!v.is_scalar())
    throw std::invalid_argument("grad_check: function must return a scalar-shaped loss, got " +
                                shape_str(v.shape));
  return v.data[0];
}

void require_finite(double v, const char* what, int64_t coord) {
  if (!std::isfinite(v))
    throw std::domain_error(std::string("grad_check: non-finite ") + what + " at coordinate " +
                            std::to_string(coord));
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& point,
                           double eps, const std::vector<int64_t>& coords) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
  Tensor analytic;
  {
    Graph g;
    const Var x = g.leaf(point);
    const Var loss = f(g, x);
    require_scalar(loss);
    g.backward(loss);
    analytic = g.has_grad(x) ? g.grad(x) : Tensor::zeros(point.shape);
  }
  const auto eval = [&](const Tensor& p) {
    Graph g;
    return require_scalar(f(g, g.leaf(p)));
  };
  std::vector<int64_t> all;
  if (coords.empty()) {
    all.resize(static_cast<size_t>(point.numel()));
    for (int64_t i = 0; i < point.numel(); ++i) all[static_cast<size_t>(i)] = i;
  }
  const std::vector<int64_t>& cs = coords.empty() ? all : coords;
  GradCheckReport rep;
  Tensor p = point;
  for (int64_t c : cs) {
    const double saved = p.data[static_cast<size_t>(c)];
    p.data[static_cast<size_t>(c)] = saved + eps;
    const double fp = eval(p);
    p.data[static_cast<size_t>(c)] = saved - eps;
    const double fm = eval(p);
    p.data[static_cast<size_t>(c)] = saved;
    const double nd = (fp - fm) / (2.0 * eps);
    const double an = analytic.data[static_cast<size_t>(c)];
    require_finite(nd, "central difference", c);
    require_finite(an, "analytic gradient", c);
    const double rel = std::fabs(an - nd) / std::max(1.0, std::fabs(nd));
    ++rep.n_checked;
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = c;
      rep.analytic = an;
      rep.numeric = nd;
    }
  }
  return rep;
}

GradCheckReport grad_check_many(
    const std::function<Var(Graph&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& points, double eps, const std::vector<ParamCoord>& coords) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(points.size());
    for (const Tensor& t : points) leaves.push_back(g.leaf(t));
    const Var loss = build(g, leaves);
    require_scalar(loss);
    g.backward(loss);
    analytic.reserve(points.size());
    for (const Var& v : leaves)
      analytic.push_back(g.has_grad(v) ? g.grad(v) : Tensor::zeros(v.value().shape));
  }
  std::vector<Tensor> p = points;
  const auto eval = [&]() {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(p.size());
    for (const Tensor& t : p) leaves.push_back(g.leaf(t));
    return require_scalar(build(g, leaves));
  };
  GradCheckReport rep;
  int64_t sample = 0;
  for (const ParamCoord& pc : coords) {
    Tensor& t = p[pc.param];
    const double saved = t.data[static_cast<size_t>(pc.coord)];
    t.data[static_cast<size_t>(pc.coord)] = saved + eps;
    const double fp = eval();
    t.data[static_cast<size_t>(pc.coord)] = saved - eps;
    const double fm = eval();
    t.data[static_cast<size_t>(pc.coord)] = saved;
    const double nd = (fp - fm) / (2.0 * eps);
    const double an = analytic[pc.param].data[static_cast<size_t>(pc.coord)];
    require_finite(nd, "central difference", sample);
    require_finite(an, "analytic gradient", sample);
    const double rel = std::fabs(an - nd) / std::max(1.0, std::fabs(nd));
    ++rep.n_checked;
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = sample;
      rep.analytic = an;
      rep.numeric = nd;
    }
    ++sample;
  }
  return rep;
}

}  // namespace nsmae
