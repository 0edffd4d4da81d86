// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace nsmae::kernels {

enum class Unary { Neg, Exp, Abs, Softplus, Sigmoid };
enum class Binary { Add, Sub, Mul, Pow };

/// Channels-last conv extents: x [batch, in_h, in_w, c_in],
/// k [k_h, k_w, c_in, c_out], y [batch, out_h, out_w, c_out].
struct Conv2dDims {
  int64_t batch, in_h, in_w, c_in;
  int64_t k_h, k_w, c_out;
  int64_t stride, pad;
  int64_t out_h, out_w;
};

Conv2dDims conv2d_dims(int64_t batch, int64_t in_h, int64_t in_w, int64_t c_in,
                       int64_t k_h, int64_t k_w, int64_t c_out, int64_t stride, int64_t pad);

double unary_apply(Unary op, double x);
double binary_apply(Binary op, double a, double b);

// OpenMP kernels. Work is split over disjoint output regions only; each output
// element's accumulation order is fixed and matches kernels::ref bit for bit,
// so results are independent of thread count.

void unary_map(Unary op, const double* x, double* y, int64_t n);
void binary_same(Binary op, const double* a, const double* b, double* y, int64_t n);

void affine_forward(const double* x, const double* w, const double* b, double* y,
                    int64_t m, int64_t c_in, int64_t c_out);
void affine_backward_x(const double* g, const double* w, double* dx,
                       int64_t m, int64_t c_in, int64_t c_out);
void affine_backward_w(const double* x, const double* g, double* dw,
                       int64_t m, int64_t c_in, int64_t c_out);
void affine_backward_b(const double* g, double* db, int64_t m, int64_t c_out);

void conv2d_forward(const double* x, const double* k, const double* bias, double* y,
                    const Conv2dDims& d);
void conv2d_backward_x(const double* g, const double* k, double* dx, const Conv2dDims& d);
void conv2d_backward_k(const double* x, const double* g, double* dk, const Conv2dDims& d);
void conv2d_backward_b(const double* g, double* db, const Conv2dDims& d);

/// Exclusive running sum along the middle extent of x viewed as [outer, n, inner]:
/// y[o, k, i] = sum_{j<k} x[o, j, i].
void exclusive_scan(const double* x, double* y, int64_t outer, int64_t n, int64_t inner);
/// Adjoint of exclusive_scan: dx[o, k, i] = sum_{j>k} g[o, j, i].
void exclusive_scan_adjoint(const double* g, double* dx, int64_t outer, int64_t n, int64_t inner);

/// y[o, i] = sum_k x[o, k, i].
void reduce_sum_axis(const double* x, double* y, int64_t outer, int64_t n, int64_t inner);
/// Flat ascending-order sum (serial; order-fixed by contract).
double reduce_sum_all(const double* x, int64_t n);

/// dfeat[m, :] = dcells[routing[m], :] (zero where routing[m] < 0).
void gather_rows(const double* dcells, const int64_t* routing, double* dfeat,
                 int64_t m, int64_t c);

// Serial reference implementations: naive loops, no pragmas. Kept for testing;
// the OpenMP kernels must match them exactly.
namespace ref {
void unary_map(Unary op, const double* x, double* y, int64_t n);
void binary_same(Binary op, const double* a, const double* b, double* y, int64_t n);
void affine_forward(const double* x, const double* w, const double* b, double* y,
                    int64_t m, int64_t c_in, int64_t c_out);
void affine_backward_x(const double* g, const double* w, double* dx,
                       int64_t m, int64_t c_in, int64_t c_out);
void affine_backward_w(const double* x, const double* g, double* dw,
                       int64_t m, int64_t c_in, int64_t c_out);
void affine_backward_b(const double* g, double* db, int64_t m, int64_t c_out);
void conv2d_forward(const double* x, const double* k, const double* bias, double* y,
                    const Conv2dDims& d);
void conv2d_backward_x(const double* g, const double* k, double* dx, const Conv2dDims& d);
void conv2d_backward_k(const double* x, const double* g, double* dk, const Conv2dDims& d);
void conv2d_backward_b(const double* g, double* db, const Conv2dDims& d);
void exclusive_scan(const double* x, double* y, int64_t outer, int64_t n, int64_t inner);
void exclusive_scan_adjoint(const double* g, double* dx, int64_t outer, int64_t n, int64_t inner);
void reduce_sum_axis(const double* x, double* y, int64_t outer, int64_t n, int64_t inner);
double reduce_sum_all(const double* x, int64_t n);
void gather_rows(const double* dcells, const int64_t* routing, double* dfeat,
                 int64_t m, int64_t c);
}  // namespace ref

}  // namespace nsmae::kernels
