// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace nsmae::kernels {

namespace {

// ceil(a / b) for b > 0, correct for negative a.
inline int64_t ceil_div(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

inline int64_t min64(int64_t a, int64_t b) { return a < b ? a : b; }
inline int64_t max64(int64_t a, int64_t b) { return a > b ? a : b; }

}  // namespace

Conv2dDims conv2d_dims(int64_t batch, int64_t in_h, int64_t in_w, int64_t c_in,
                       int64_t k_h, int64_t k_w, int64_t c_out, int64_t stride, int64_t pad) {
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  Conv2dDims d{batch, in_h, in_w, c_in, k_h, k_w, c_out, stride, pad, 0, 0};
  d.out_h = (in_h + 2 * pad - k_h) / stride + 1;
  d.out_w = (in_w + 2 * pad - k_w) / stride + 1;
  if (d.out_h < 1 || d.out_w < 1)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  return d;
}

double unary_apply(Unary op, double x) {
  switch (op) {
    case Unary::Neg:
      return -x;
    case Unary::Exp:
      return std::exp(x);
    case Unary::Abs:
      return std::fabs(x);
    case Unary::Softplus:
      // max(x,0) + log1p(exp(-|x|)) is exact and overflow-free
      return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
    case Unary::Sigmoid:
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
  }
  return 0.0;
}

double binary_apply(Binary op, double a, double b) {
  switch (op) {
    case Binary::Add:
      return a + b;
    case Binary::Sub:
      return a - b;
    case Binary::Mul:
      return a * b;
    case Binary::Pow:
      return std::pow(a, b);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// OpenMP kernels
// ---------------------------------------------------------------------------

void unary_map(Unary op, const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int64_t i = 0; i < n; ++i) y[i] = unary_apply(op, x[i]);
}

void binary_same(Binary op, const double* a, const double* b, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int64_t i = 0; i < n; ++i) y[i] = binary_apply(op, a[i], b[i]);
}

void affine_forward(const double* x, const double* w, const double* b, double* y,
                    int64_t m, int64_t c_in, int64_t c_out) {
#pragma omp parallel for schedule(static) if (m > 8)
  for (int64_t r = 0; r < m; ++r) {
    double* yr = y + r * c_out;
    const double* xr = x + r * c_in;
    for (int64_t o = 0; o < c_out; ++o) yr[o] = b[o];
    for (int64_t i = 0; i < c_in; ++i) {
      const double xv = xr[i];
      const double* wr = w + i * c_out;
      for (int64_t o = 0; o < c_out; ++o) yr[o] += xv * wr[o];
    }
  }
}

void affine_backward_x(const double* g, const double* w, double* dx,
                       int64_t m, int64_t c_in, int64_t c_out) {
#pragma omp parallel for schedule(static) if (m > 8)
  for (int64_t r = 0; r < m; ++r) {
    const double* gr = g + r * c_out;
    double* dxr = dx + r * c_in;
    for (int64_t i = 0; i < c_in; ++i) {
      const double* wr = w + i * c_out;
      double acc = 0.0;
      for (int64_t o = 0; o < c_out; ++o) acc += gr[o] * wr[o];
      dxr[i] = acc;
    }
  }
}

void affine_backward_w(const double* x, const double* g, double* dw,
                       int64_t m, int64_t c_in, int64_t c_out) {
#pragma omp parallel for schedule(static) if (c_in > 4)
  for (int64_t i = 0; i < c_in; ++i) {
    double* dwr = dw + i * c_out;
    for (int64_t o = 0; o < c_out; ++o) dwr[o] = 0.0;
    for (int64_t r = 0; r < m; ++r) {
      const double xv = x[r * c_in + i];
      const double* gr = g + r * c_out;
      for (int64_t o = 0; o < c_out; ++o) dwr[o] += xv * gr[o];
    }
  }
}

void affine_backward_b(const double* g, double* db, int64_t m, int64_t c_out) {
#pragma omp parallel for schedule(static) if (c_out > 16)
  for (int64_t o = 0; o < c_out; ++o) {
    double acc = 0.0;
    for (int64_t r = 0; r < m; ++r) acc += g[r * c_out + o];
    db[o] = acc;
  }
}

void conv2d_forward(const double* x, const double* k, const double* bias, double* y,
                    const Conv2dDims& d) {
  const int64_t rows = d.batch * d.out_h;
#pragma omp parallel for schedule(static) if (rows > 4)
  for (int64_t row = 0; row < rows; ++row) {
    const int64_t n = row / d.out_h, oh = row % d.out_h;
    double* yrow = y + (n * d.out_h + oh) * d.out_w * d.c_out;
    for (int64_t ow = 0; ow < d.out_w; ++ow)
      for (int64_t o = 0; o < d.c_out; ++o) yrow[ow * d.c_out + o] = bias[o];
    for (int64_t kh = 0; kh < d.k_h; ++kh) {
      const int64_t ih = oh * d.stride + kh - d.pad;
      if (ih < 0 || ih >= d.in_h) continue;
      for (int64_t kw = 0; kw < d.k_w; ++kw) {
        const int64_t ow_lo = max64(0, ceil_div(d.pad - kw, d.stride));
        const int64_t ow_hi = min64(d.out_w - 1, (d.in_w - 1 + d.pad - kw) / d.stride);
        const double* krow = k + (kh * d.k_w + kw) * d.c_in * d.c_out;
        for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
          const int64_t iw = ow * d.stride + kw - d.pad;
          const double* xpix = x + ((n * d.in_h + ih) * d.in_w + iw) * d.c_in;
          double* ypix = yrow + ow * d.c_out;
          for (int64_t i = 0; i < d.c_in; ++i) {
            const double xv = xpix[i];
            const double* kr = krow + i * d.c_out;
            for (int64_t o = 0; o < d.c_out; ++o) ypix[o] += xv * kr[o];
          }
        }
      }
    }
  }
}

void conv2d_backward_x(const double* g, const double* k, double* dx, const Conv2dDims& d) {
  const int64_t rows = d.batch * d.in_h;
#pragma omp parallel for schedule(static) if (rows > 4)
  for (int64_t row = 0; row < rows; ++row) {
    const int64_t n = row / d.in_h, ih = row % d.in_h;
    double* dxrow = dx + (n * d.in_h + ih) * d.in_w * d.c_in;
    for (int64_t i = 0; i < d.in_w * d.c_in; ++i) dxrow[i] = 0.0;
    for (int64_t kh = 0; kh < d.k_h; ++kh) {
      const int64_t ohnum = ih + d.pad - kh;
      if (ohnum < 0 || ohnum % d.stride != 0) continue;
      const int64_t oh = ohnum / d.stride;
      if (oh >= d.out_h) continue;
      for (int64_t kw = 0; kw < d.k_w; ++kw) {
        const int64_t ow_lo = max64(0, ceil_div(d.pad - kw, d.stride));
        const int64_t ow_hi = min64(d.out_w - 1, (d.in_w - 1 + d.pad - kw) / d.stride);
        const double* krow = k + (kh * d.k_w + kw) * d.c_in * d.c_out;
        for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
          const int64_t iw = ow * d.stride + kw - d.pad;
          const double* gpix = g + ((n * d.out_h + oh) * d.out_w + ow) * d.c_out;
          double* dxpix = dxrow + iw * d.c_in;
          for (int64_t i = 0; i < d.c_in; ++i) {
            // term-at-a-time accumulation keeps the summation chain identical
            // to the serial reference
            const double* kr = krow + i * d.c_out;
            double acc = dxpix[i];
            for (int64_t o = 0; o < d.c_out; ++o) acc += gpix[o] * kr[o];
            dxpix[i] = acc;
          }
        }
      }
    }
  }
}

void conv2d_backward_k(const double* x, const double* g, double* dk, const Conv2dDims& d) {
  const int64_t taps = d.k_h * d.k_w;
#pragma omp parallel for schedule(static) if (taps > 1)
  for (int64_t tap = 0; tap < taps; ++tap) {
    const int64_t kh = tap / d.k_w, kw = tap % d.k_w;
    double* dkt = dk + tap * d.c_in * d.c_out;
    for (int64_t i = 0; i < d.c_in * d.c_out; ++i) dkt[i] = 0.0;
    for (int64_t n = 0; n < d.batch; ++n) {
      for (int64_t oh = 0; oh < d.out_h; ++oh) {
        const int64_t ih = oh * d.stride + kh - d.pad;
        if (ih < 0 || ih >= d.in_h) continue;
        const int64_t ow_lo = max64(0, ceil_div(d.pad - kw, d.stride));
        const int64_t ow_hi = min64(d.out_w - 1, (d.in_w - 1 + d.pad - kw) / d.stride);
        for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
          const int64_t iw = ow * d.stride + kw - d.pad;
          const double* xpix = x + ((n * d.in_h + ih) * d.in_w + iw) * d.c_in;
          const double* gpix = g + ((n * d.out_h + oh) * d.out_w + ow) * d.c_out;
          for (int64_t i = 0; i < d.c_in; ++i) {
            const double xv = xpix[i];
            double* dkr = dkt + i * d.c_out;
            for (int64_t o = 0; o < d.c_out; ++o) dkr[o] += xv * gpix[o];
          }
        }
      }
    }
  }
}

void conv2d_backward_b(const double* g, double* db, const Conv2dDims& d) {
  const int64_t pixels = d.batch * d.out_h * d.out_w;
#pragma omp parallel for schedule(static) if (d.c_out > 16)
  for (int64_t o = 0; o < d.c_out; ++o) {
    double acc = 0.0;
    for (int64_t p = 0; p < pixels; ++p) acc += g[p * d.c_out + o];
    db[o] = acc;
  }
}

void exclusive_scan(const double* x, double* y, int64_t outer, int64_t n, int64_t inner) {
#pragma omp parallel for schedule(static) if (outer > 8)
  for (int64_t o = 0; o < outer; ++o) {
    const int64_t base = o * n * inner;
    for (int64_t i = 0; i < inner; ++i) y[base + i] = 0.0;
    for (int64_t k = 1; k < n; ++k)
      for (int64_t i = 0; i < inner; ++i)
        y[base + k * inner + i] = y[base + (k - 1) * inner + i] + x[base + (k - 1) * inner + i];
  }
}

void exclusive_scan_adjoint(const double* g, double* dx, int64_t outer, int64_t n, int64_t inner) {
#pragma omp parallel for schedule(static) if (outer > 8)
  for (int64_t o = 0; o < outer; ++o) {
    const int64_t base = o * n * inner;
    for (int64_t i = 0; i < inner; ++i) dx[base + (n - 1) * inner + i] = 0.0;
    for (int64_t k = n - 2; k >= 0; --k)
      for (int64_t i = 0; i < inner; ++i)
        dx[base + k * inner + i] = dx[base + (k + 1) * inner + i] + g[base + (k + 1) * inner + i];
  }
}

void reduce_sum_axis(const double* x, double* y, int64_t outer, int64_t n, int64_t inner) {
#pragma omp parallel for schedule(static) if (outer > 8)
  for (int64_t o = 0; o < outer; ++o) {
    double* yr = y + o * inner;
    const double* xr = x + o * n * inner;
    for (int64_t i = 0; i < inner; ++i) yr[i] = 0.0;
    for (int64_t k = 0; k < n; ++k)
      for (int64_t i = 0; i < inner; ++i) yr[i] += xr[k * inner + i];
  }
}

double reduce_sum_all(const double* x, int64_t n) {
  // flat ascending order; kept serial so the sum is order-fixed by construction
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

void gather_rows(const double* dcells, const int64_t* routing, double* dfeat,
                 int64_t m, int64_t c) {
#pragma omp parallel for schedule(static) if (m > 64)
  for (int64_t r = 0; r < m; ++r) {
    double* out = dfeat + r * c;
    if (routing[r] < 0) {
      for (int64_t i = 0; i < c; ++i) out[i] = 0.0;
    } else {
      const double* src = dcells + routing[r] * c;
      for (int64_t i = 0; i < c; ++i) out[i] = src[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Serial references
// ---------------------------------------------------------------------------

namespace ref {

void unary_map(Unary op, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = unary_apply(op, x[i]);
}

void binary_same(Binary op, const double* a, const double* b, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = binary_apply(op, a[i], b[i]);
}

void affine_forward(const double* x, const double* w, const double* b, double* y,
                    int64_t m, int64_t c_in, int64_t c_out) {
  for (int64_t r = 0; r < m; ++r)
    for (int64_t o = 0; o < c_out; ++o) {
      double acc = b[o];
      for (int64_t i = 0; i < c_in; ++i) acc += x[r * c_in + i] * w[i * c_out + o];
      y[r * c_out + o] = acc;
    }
}

void affine_backward_x(const double* g, const double* w, double* dx,
                       int64_t m, int64_t c_in, int64_t c_out) {
  for (int64_t r = 0; r < m; ++r)
    for (int64_t i = 0; i < c_in; ++i) {
      double acc = 0.0;
      for (int64_t o = 0; o < c_out; ++o) acc += g[r * c_out + o] * w[i * c_out + o];
      dx[r * c_in + i] = acc;
    }
}

void affine_backward_w(const double* x, const double* g, double* dw,
                       int64_t m, int64_t c_in, int64_t c_out) {
  for (int64_t i = 0; i < c_in; ++i)
    for (int64_t o = 0; o < c_out; ++o) {
      double acc = 0.0;
      for (int64_t r = 0; r < m; ++r) acc += x[r * c_in + i] * g[r * c_out + o];
      dw[i * c_out + o] = acc;
    }
}

void affine_backward_b(const double* g, double* db, int64_t m, int64_t c_out) {
  for (int64_t o = 0; o < c_out; ++o) {
    double acc = 0.0;
    for (int64_t r = 0; r < m; ++r) acc += g[r * c_out + o];
    db[o] = acc;
  }
}

void conv2d_forward(const double* x, const double* k, const double* bias, double* y,
                    const Conv2dDims& d) {
  for (int64_t n = 0; n < d.batch; ++n)
    for (int64_t oh = 0; oh < d.out_h; ++oh)
      for (int64_t ow = 0; ow < d.out_w; ++ow)
        for (int64_t o = 0; o < d.c_out; ++o) {
          double acc = bias[o];
          for (int64_t kh = 0; kh < d.k_h; ++kh) {
            const int64_t ih = oh * d.stride + kh - d.pad;
            if (ih < 0 || ih >= d.in_h) continue;
            for (int64_t kw = 0; kw < d.k_w; ++kw) {
              const int64_t iw = ow * d.stride + kw - d.pad;
              if (iw < 0 || iw >= d.in_w) continue;
              for (int64_t i = 0; i < d.c_in; ++i)
                acc += x[((n * d.in_h + ih) * d.in_w + iw) * d.c_in + i] *
                       k[((kh * d.k_w + kw) * d.c_in + i) * d.c_out + o];
            }
          }
          y[((n * d.out_h + oh) * d.out_w + ow) * d.c_out + o] = acc;
        }
}

void conv2d_backward_x(const double* g, const double* k, double* dx, const Conv2dDims& d) {
  for (int64_t n = 0; n < d.batch; ++n)
    for (int64_t ih = 0; ih < d.in_h; ++ih)
      for (int64_t iw = 0; iw < d.in_w; ++iw)
        for (int64_t i = 0; i < d.c_in; ++i) {
          double acc = 0.0;
          for (int64_t kh = 0; kh < d.k_h; ++kh) {
            const int64_t ohnum = ih + d.pad - kh;
            if (ohnum < 0 || ohnum % d.stride != 0) continue;
            const int64_t oh = ohnum / d.stride;
            if (oh >= d.out_h) continue;
            for (int64_t kw = 0; kw < d.k_w; ++kw) {
              const int64_t ownum = iw + d.pad - kw;
              if (ownum < 0 || ownum % d.stride != 0) continue;
              const int64_t ow = ownum / d.stride;
              if (ow >= d.out_w) continue;
              for (int64_t o = 0; o < d.c_out; ++o)
                acc += g[((n * d.out_h + oh) * d.out_w + ow) * d.c_out + o] *
                       k[((kh * d.k_w + kw) * d.c_in + i) * d.c_out + o];
            }
          }
          dx[((n * d.in_h + ih) * d.in_w + iw) * d.c_in + i] = acc;
        }
}

void conv2d_backward_k(const double* x, const double* g, double* dk, const Conv2dDims& d) {
  for (int64_t kh = 0; kh < d.k_h; ++kh)
    for (int64_t kw = 0; kw < d.k_w; ++kw)
      for (int64_t i = 0; i < d.c_in; ++i)
        for (int64_t o = 0; o < d.c_out; ++o) {
          double acc = 0.0;
          for (int64_t n = 0; n < d.batch; ++n)
            for (int64_t oh = 0; oh < d.out_h; ++oh) {
              const int64_t ih = oh * d.stride + kh - d.pad;
              if (ih < 0 || ih >= d.in_h) continue;
              for (int64_t ow = 0; ow < d.out_w; ++ow) {
                const int64_t iw = ow * d.stride + kw - d.pad;
                if (iw < 0 || iw >= d.in_w) continue;
                acc += x[((n * d.in_h + ih) * d.in_w + iw) * d.c_in + i] *
                       g[((n * d.out_h + oh) * d.out_w + ow) * d.c_out + o];
              }
            }
          dk[((kh * d.k_w + kw) * d.c_in + i) * d.c_out + o] = acc;
        }
}

void conv2d_backward_b(const double* g, double* db, const Conv2dDims& d) {
  const int64_t pixels = d.batch * d.out_h * d.out_w;
  for (int64_t o = 0; o < d.c_out; ++o) {
    double acc = 0.0;
    for (int64_t p = 0; p < pixels; ++p) acc += g[p * d.c_out + o];
    db[o] = acc;
  }
}

void exclusive_scan(const double* x, double* y, int64_t outer, int64_t n, int64_t inner) {
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * n * inner + i;
      double acc = 0.0;
      for (int64_t k = 0; k < n; ++k) {
        y[base + k * inner] = acc;
        acc += x[base + k * inner];
      }
    }
}

void exclusive_scan_adjoint(const double* g, double* dx, int64_t outer, int64_t n, int64_t inner) {
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * n * inner + i;
      double acc = 0.0;
      for (int64_t k = n - 1; k >= 0; --k) {
        dx[base + k * inner] = acc;
        acc += g[base + k * inner];
      }
    }
}

void reduce_sum_axis(const double* x, double* y, int64_t outer, int64_t n, int64_t inner) {
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (int64_t k = 0; k < n; ++k) acc += x[(o * n + k) * inner + i];
      y[o * inner + i] = acc;
    }
}

double reduce_sum_all(const double* x, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

void gather_rows(const double* dcells, const int64_t* routing, double* dfeat,
                 int64_t m, int64_t c) {
  for (int64_t r = 0; r < m; ++r)
    for (int64_t i = 0; i < c; ++i)
      dfeat[r * c + i] = routing[r] < 0 ? 0.0 : dcells[routing[r] * c + i];
}

}  // namespace ref

}  // namespace nsmae::kernels
