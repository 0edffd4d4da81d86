// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "nsmae/grad_check.hpp"
#include "nsmae/graph.hpp"
#include "nsmae/rng.hpp"
#include "support/testers.hpp"

using namespace nsmae;
using nsmae::test::bits_equal;
using nsmae::test::expect_throw_contains;
using nsmae::test::rand_signed;
using nsmae::test::rand_tensor;

TEST_CASE("elementwise basics") {
  Graph g;
  const Var x = g.leaf(Tensor::from({1}, {0.0}));
  const Var y = vexp(x);
  CHECK(y.value().data[0] == 1.0);
  g.backward(sum(y));
  CHECK(g.grad(x).data[0] == 1.0);

  Graph g2;
  const Var a = g2.constant(Tensor::from({2}, {1, 2}));
  const Var b = g2.constant(Tensor::from({2}, {3, 4}));
  const Tensor& s = add(a, b).value();
  CHECK(s.data[0] == 4.0);
  CHECK(s.data[1] == 6.0);
}

TEST_CASE("softplus deep in the negative tail") {
  Graph g;
  const Var x = g.leaf(Tensor::from({1}, {-50.0}));
  const Var y = softplus(x);
  CHECK(y.value().data[0] > 0.0);
  CHECK(y.value().data[0] < 1e-20);
  g.backward(sum(y));
  CHECK(g.grad(x).data[0] > 0.0);
  CHECK(g.grad(x).data[0] < 1e-20);
}

TEST_CASE("binary shape mismatch reports both shapes") {
  Graph g;
  const Var a = g.constant(Tensor::zeros({2, 3}));
  const Var b = g.constant(Tensor::zeros({2, 4}));
  expect_throw_contains<std::invalid_argument>([&] { add(a, b); }, "[2,3] vs [2,4]");
}

TEST_CASE("broadcasting in ops") {
  Graph g;
  const Var a = g.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Var b = g.leaf(Tensor::from({3}, {10, 20, 30}));
  const Var y = mul(a, b);
  CHECK(y.value().shape == Shape{2, 3});
  CHECK(y.value().data[4] == 100.0);
  g.backward(sum(y));
  // the broadcast side reduces over the leading extent
  CHECK(g.grad(b).shape == Shape{3});
  CHECK(g.grad(b).data[0] == 5.0);  // 1 + 4
  CHECK(g.grad(a).data[0] == 10.0);

  Graph g2;
  const Var s = g2.leaf(Tensor::scalar(2.0));
  const Var v = g2.constant(Tensor::from({3}, {1, 2, 3}));
  const Var z = mul(v, s);
  CHECK(z.value().data[2] == 6.0);
  g2.backward(sum(z));
  CHECK(g2.grad(s).data[0] == 6.0);
}

TEST_CASE("reductions") {
  Graph g;
  const Var x = g.leaf(Tensor::from({3}, {1, 2, 3}));
  CHECK(sum(x).value().data[0] == 6.0);
  CHECK(mean(g.constant(Tensor::from({2}, {2, 4}))).value().data[0] == 3.0);
  g.backward(sum(x));
  for (double v : g.grad(x).data) CHECK(v == 1.0);

  Graph g2;
  const Var m = g2.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
  const Var s0 = sum(m, 0);
  CHECK(s0.value().shape == Shape{2});
  CHECK(s0.value().data[0] == 4.0);
  const Var s1 = sum(m, 1, true);
  CHECK(s1.value().shape == Shape{2, 1});
  CHECK(s1.value().data[1] == 7.0);
  expect_throw_contains<std::invalid_argument>([&] { sum(m, 2); }, "axis 2 out of range");
}

TEST_CASE("exclusive_prefix_sum") {
  Graph g;
  const Var x = g.leaf(Tensor::from({3}, {1, 2, 3}));
  const Var y = exclusive_prefix_sum(x, 0);
  CHECK(y.value().data == std::vector<double>{0, 1, 3});

  const Var z = exclusive_prefix_sum(g.constant(Tensor::zeros({4})), 0);
  for (double v : z.value().data) CHECK(v == 0.0);

  // gradient vs central differences
  Rng rng(11);
  const auto rep = grad_check(
      [](Graph& gr, Var v) {
        const Var w = gr.constant(Tensor::from({5}, {0.3, -0.7, 1.1, 0.2, -0.4}));
        return sum(mul(exclusive_prefix_sum(v, 0), w));
      },
      rand_tensor(rng, {5}, -1.0, 1.0), 1e-6);
  CHECK(rep.max_rel_err <= 1e-8);
}

TEST_CASE("scan followed by adjacent differences recovers the input exactly") {
  // Exact recovery is a statement about the scan's summation structure, so the
  // inputs sit on a common dyadic grid (multiples of 2^-10, magnitude <= 2):
  // every partial sum is then representable and the subtraction is exact.
  Rng rng(12);
  Tensor x = Tensor::zeros({4, 6});
  for (double& v : x.data) v = (static_cast<double>(rng.below(4097)) - 2048.0) / 1024.0;
  Graph g;
  const Var y = exclusive_prefix_sum(g.constant(x), 1);
  const Tensor& t = y.value();
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t k = 0; k < 5; ++k) {
      const double diff = t.at({r, k + 1}) - t.at({r, k});
      CHECK(diff == x.at({r, k}));
    }
}

TEST_CASE("affine identity and conv2d counting") {
  Graph g;
  const Var x = g.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  Tensor wid = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) wid.at({i, i}) = 1.0;
  const Var y = affine(x, g.constant(wid), g.constant(Tensor::zeros({3})));
  CHECK(bits_equal(y.value(), x.value()));

  Graph g2;
  const Var im = g2.constant(Tensor::full({3, 3, 1}, 1.0));
  const Var k = g2.constant(Tensor::full({3, 3, 1, 1}, 1.0));
  const Var out = conv2d(im, k, 1, 0);
  CHECK(out.value().shape == Shape{1, 1, 1});
  CHECK(out.value().data[0] == 9.0);
}

TEST_CASE("conv2d random kernel gradient vs finite differences") {
  Rng rng(13);
  const Tensor input = rand_tensor(rng, {5, 6, 2}, -1.0, 1.0);
  // k 2x2, stride 1, pad 1 over 5x6 input -> 6x7 output
  const Tensor w = rand_tensor(rng, {6, 7, 3}, -1.0, 1.0);
  const auto rep = grad_check(
      [&](Graph& gr, Var kv) {
        const Var im = gr.constant(input);
        return sum(mul(conv2d(im, kv, 1, 1), gr.constant(w)));
      },
      rand_tensor(rng, {2, 2, 2, 3}, -1.0, 1.0), 1e-5);
  CHECK(rep.n_checked == 24);
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("backward contracts") {
  Graph g;
  const Var x = g.leaf(Tensor::from({2}, {1, 2}));
  const Var loss = sum(mul(x, x));
  g.backward(loss);
  CHECK(g.grad(x).data == std::vector<double>{2, 4});

  // repeated calls without reset are rejected
  CHECK_THROWS_AS(g.backward(loss), std::logic_error);

  Graph g2;
  const Var y = g2.leaf(Tensor::from({2}, {1, 2}));
  CHECK_THROWS_AS(g2.backward(y), std::invalid_argument);  // non-scalar loss

  Graph g3;
  const Var z = g3.leaf(Tensor::scalar(1.0));
  (void)z;
  CHECK_THROWS_AS(g.backward(Var{&g3, 0}), std::invalid_argument);  // detached graph
}

TEST_CASE("backward linearity over independent losses") {
  Rng rng(14);
  const Tensor p = rand_signed(rng, {6}, 0.2, 1.5);
  Tensor ga, gb, gsum;
  {
    Graph g;
    const Var x = g.leaf(p);
    g.backward(sum(mul(x, x)));
    ga = g.grad(x);
  }
  {
    Graph g;
    const Var x = g.leaf(p);
    g.backward(sum(vexp(x)));
    gb = g.grad(x);
  }
  {
    Graph g;
    const Var x = g.leaf(p);
    g.backward(add(sum(mul(x, x)), sum(vexp(x))));
    gsum = g.grad(x);
  }
  for (size_t i = 0; i < gsum.data.size(); ++i)
    CHECK(gsum.data[i] == doctest::Approx(ga.data[i] + gb.data[i]).epsilon(1e-15));
}

TEST_CASE("identical op sequences are bit-identical, values and gradients") {
  const auto run = [](Tensor& grad_out) {
    Rng rng(99);
    Graph g;
    const Var x = g.leaf(rand_tensor(rng, {4, 5}, -1.0, 1.0));
    const Var w = g.constant(rand_tensor(rng, {5, 3}, -1.0, 1.0));
    const Var b = g.constant(rand_tensor(rng, {3}, -0.5, 0.5));
    const Var h = softplus(affine(x, w, b));
    const Var loss = mean(mul(h, h));
    g.backward(loss);
    grad_out = g.grad(x);
    return loss.value().data[0];
  };
  Tensor g1, g2;
  const double l1 = run(g1);
  const double l2 = run(g2);
  CHECK(l1 == l2);
  CHECK(bits_equal(g1, g2));
}

TEST_CASE("grad_check harness on known functions") {
  Rng rng(15);
  // f = sum: analytic side is exactly 1, numeric side only rounds
  const auto r1 = grad_check([](Graph&, Var v) { return sum(v); },
                             rand_tensor(rng, {7}, -2.0, 2.0), 1e-5);
  CHECK(r1.max_rel_err <= 1e-9);
  // f = sum(exp)
  const auto r2 = grad_check([](Graph&, Var v) { return sum(vexp(v)); },
                             Tensor::from({2}, {0.0, 1.0}), 1e-6);
  CHECK(r2.max_rel_err <= 1e-8);
  CHECK_THROWS_AS(grad_check([](Graph&, Var v) { return sum(v); }, Tensor::scalar(1.0), 0.0),
                  std::invalid_argument);
}

TEST_CASE("shape ops") {
  Graph g;
  const Var x = g.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Var r = reshape(x, {3, 2});
  CHECK(r.value().shape == Shape{3, 2});
  CHECK(r.value().data == x.value().data);
  expect_throw_contains<std::invalid_argument>([&] { reshape(x, {4, 2}); }, "cannot view");

  const Var sl = slice(x, 1, 1, 2);
  CHECK(sl.value().shape == Shape{2, 2});
  CHECK(sl.value().data == std::vector<double>{2, 3, 5, 6});
  CHECK_THROWS_AS(slice(x, 1, 2, 2), std::invalid_argument);

  const Var c = concat(x, x, 0);
  CHECK(c.value().shape == Shape{4, 3});
  const Var c1 = concat(x, slice(x, 1, 0, 1), 1);
  CHECK(c1.value().shape == Shape{2, 4});
  expect_throw_contains<std::invalid_argument>(
      [&] { concat(x, g.constant(Tensor::zeros({3, 3})), 1); }, "extent mismatch");

  const Var f = flip(x, 1);
  CHECK(f.value().data == std::vector<double>{3, 2, 1, 6, 5, 4});

  const Var p = permute(x, {1, 0});
  CHECK(p.value().shape == Shape{3, 2});
  CHECK(p.value().at({2, 1}) == 6.0);
  CHECK_THROWS_AS(permute(x, {0, 0}), std::invalid_argument);

  g.backward(sum(mul(slice(x, 0, 0, 1), g.constant(Tensor::from({1, 3}, {1, 2, 3})))));
  CHECK(g.grad(x).data == std::vector<double>{1, 2, 3, 0, 0, 0});
}

TEST_CASE("scatter_rows semantics") {
  Graph g;
  const Var feat = g.leaf(Tensor::from({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  auto routing = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{1, 0, 1, -1});
  const Var out = scatter_rows(feat, routing, 3);
  CHECK(out.value().shape == Shape{3, 2});
  CHECK(out.value().at({0, 0}) == 3.0);
  CHECK(out.value().at({1, 0}) == 6.0);  // rows 0 and 2
  CHECK(out.value().at({2, 1}) == 0.0);
  const Var w = g.constant(Tensor::from({3, 2}, {1, 1, 2, 2, 3, 3}));
  g.backward(sum(mul(out, w)));
  // dropped row gets zero gradient; routed rows get the cell weight
  CHECK(g.grad(feat).data == std::vector<double>{2, 2, 1, 1, 2, 2, 0, 0});
}

TEST_CASE("softmax normalizes and differentiates exactly") {
  Rng rng(16);
  Graph g;
  const Var x = g.constant(rand_tensor(rng, {3, 5}, -4.0, 4.0));
  const Tensor& sm = softmax(x, 1).value();
  for (int64_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int64_t k = 0; k < 5; ++k) s += sm.at({r, k});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Tensor w = rand_tensor(rng, {4}, -1.0, 1.0);
  const auto rep = grad_check(
      [&](Graph& gr, Var v) { return sum(mul(softmax(v, 0), gr.constant(w))); },
      rand_tensor(rng, {4}, -3.0, 3.0), 1e-5);
  CHECK(rep.max_rel_err <= 1e-8);
}

TEST_CASE("finite checks catch poisoned values when enabled") {
  Graph g;
  g.set_check_finite(true);
  const Var x = g.leaf(Tensor::from({2}, {1.0, 0.0}));
  expect_throw_contains<std::domain_error>([&] { vpow(x, -1.0); }, "non-finite");
}

// Spec invariant: every differentiable op passes grad_check with relative
// error <= 1e-6 at 100 random points (points kept away from |x|'s kink).
TEST_CASE("op sweep: gradients at 100 random points each") {
  struct OpCase {
    const char* name;
    Shape shape;
    bool positive_only;
    std::function<Var(Graph&, Var)> f;
  };
  Rng aux(20);
  const Tensor w23 = rand_tensor(aux, {2, 3}, -1.0, 1.0);
  const Tensor w3 = rand_tensor(aux, {3}, -1.0, 1.0);
  const Tensor w4 = rand_tensor(aux, {4}, -1.0, 1.0);
  const Tensor w32 = rand_tensor(aux, {3, 2}, -1.0, 1.0);
  const Tensor w25 = rand_tensor(aux, {2, 5}, -1.0, 1.0);
  const Tensor w42 = rand_tensor(aux, {4, 2}, -1.0, 1.0);
  const Tensor x43 = rand_tensor(aux, {4, 3}, -1.0, 1.0);
  const Tensor b2 = Tensor::from({2}, {0.1, -0.2});
  const Tensor x452 = rand_tensor(aux, {4, 5, 2}, -1.0, 1.0);
  const Tensor k3322 = rand_tensor(aux, {3, 3, 2, 2}, -1.0, 1.0);
  const Tensor w232 = rand_tensor(aux, {2, 3, 2}, -1.0, 1.0);
  const Tensor w343 = rand_tensor(aux, {3, 4, 3}, -1.0, 1.0);
  const Tensor img = rand_tensor(aux, {4, 4, 3}, 0.0, 1.0);
  const Tensor wimg = rand_tensor(aux, {4, 4, 3}, -1.0, 1.0);
  Tensor mask = Tensor::zeros({4, 4});
  for (int64_t y = 0; y < 2; ++y)
    for (int64_t x = 0; x < 2; ++x) mask.at({y, x}) = 1.0;
  auto routing = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{2, 0, 2, 1, -1, 0});
  const Tensor wcells = rand_tensor(aux, {3, 2}, -1.0, 1.0);

  const std::vector<OpCase> cases = {
      {"add", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(add(v, g.constant(w3)), g.constant(w23))); }},
      {"subtract", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(sub(g.constant(w3), v), g.constant(w23))); }},
      {"multiply", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(mul(v, g.constant(w3)), g.constant(w23))); }},
      {"power", {2, 3}, true, [&](Graph& g, Var v) { return sum(mul(vpow(v, 1.7), g.constant(w23))); }},
      {"power-exponent", {3}, true, [&](Graph& g, Var v) { return sum(vpow(g.constant(Tensor::from({3}, {0.7, 1.3, 2.1})), v)); }},
      {"negate", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(neg(v), g.constant(w23))); }},
      {"exponential", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(vexp(v), g.constant(w23))); }},
      {"absolute-value", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(vabs(v), g.constant(w23))); }},
      {"softplus", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(softplus(v), g.constant(w23))); }},
      {"sigmoid", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(sigmoid(v), g.constant(w23))); }},
      {"sum-axis", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(sum(v, 0), g.constant(w3))); }},
      {"mean-axis", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(mean(v, 1), g.constant(Tensor::from({2}, {0.4, -0.9})))); }},
      {"exclusive_prefix_sum", {2, 3}, false, [&](Graph& g, Var v) { return sum(mul(exclusive_prefix_sum(v, 1), g.constant(w23))); }},
      {"shape-pipeline", {2, 3}, false,
       [&](Graph& g, Var v) {
         const Var y = permute(flip(reshape(v, {3, 2}), 0), {1, 0});
         return sum(mul(concat(slice(y, 1, 0, 2), y, 1), g.constant(w25)));
       }},
      {"affine-x", {4, 3}, false, [&](Graph& g, Var v) { return sum(mul(affine(v, g.constant(w32), g.constant(b2)), g.constant(w42))); }},
      {"affine-w", {3, 2}, false, [&](Graph& g, Var v) { return sum(mul(affine(g.constant(x43), v, g.constant(b2)), g.constant(w42))); }},
      {"affine-b", {2}, false, [&](Graph& g, Var v) { return sum(mul(affine(g.constant(x43), g.constant(w32), v), g.constant(w42))); }},
      {"conv2d-x", {4, 5, 2}, false, [&](Graph& g, Var v) { return sum(mul(conv2d(v, g.constant(k3322), 2, 1), g.constant(w232))); }},
      {"conv2d-k", {2, 2, 2, 3}, false, [&](Graph& g, Var v) { return sum(mul(conv2d(g.constant(x452), v, 1, 0), g.constant(w343))); }},
      {"scatter_rows", {6, 2}, false, [&](Graph& g, Var v) { return sum(mul(scatter_rows(v, routing, 3), g.constant(wcells))); }},
      {"apply_mask_token", {2, 2, 3}, false, [&](Graph& g, Var v) { return sum(mul(apply_mask_token(g.constant(img), v, mask), g.constant(wimg))); }},
      {"softmax", {4}, false, [&](Graph& g, Var v) { return sum(mul(softmax(v, 0), g.constant(w4))); }},
  };

  Rng rng(21);
  for (const OpCase& oc : cases) {
    INFO("op: " << oc.name);
    double worst = 0.0;
    for (int pt = 0; pt < 100; ++pt) {
      const Tensor p = oc.positive_only ? rand_tensor(rng, oc.shape, 0.2, 1.6)
                                        : rand_signed(rng, oc.shape, 0.15, 1.6);
      const auto rep = grad_check(oc.f, p, 1e-5);
      if (rep.max_rel_err > worst) worst = rep.max_rel_err;
    }
    CHECK(worst <= 1e-6);
  }
}
