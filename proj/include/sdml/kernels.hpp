#pragma once

// Dense CPU kernels backing the tensor ops. Every kernel exists in two
// drivers, `*_serial` (reference) and `*_omp` (OpenMP over independent
// output slices); both call the same per-output inner routine, so their
// results are bitwise identical at any thread count. The dispatching
// overload picks a driver by work size. tools/bench_kernels compares the
// two drivers; tests/test_kernels.cpp asserts bitwise parity.

#include <cmath>
#include <cstddef>
#include <cstdint>

#include "sdml/common.hpp"

namespace sdml::kernels {

#ifdef _OPENMP
#define SDML_OMP_FOR _Pragma("omp parallel for schedule(static)")
#else
#define SDML_OMP_FOR
#endif

// ---------------------------------------------------------------- gemm ---
// Row-major. y[m,n] = a[m,k] * b[k,n] (nn), a[m,k] * b[n,k]^T (nt),
// a[k,m]^T * b[k,n] (tn). Accumulation order over k is fixed.

template <class T>
inline void gemm_nn_row(const T* a, const T* b, T* y, int i, int k, int n) {
  const T* ai = a + static_cast<std::size_t>(i) * k;
  T* yi = y + static_cast<std::size_t>(i) * n;
  for (int j = 0; j < n; ++j) yi[j] = T(0);
  for (int p = 0; p < k; ++p) {
    const T aip = ai[p];
    const T* bp = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) yi[j] += aip * bp[j];
  }
}

template <class T>
void gemm_nn_serial(const T* a, const T* b, T* y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) gemm_nn_row(a, b, y, i, k, n);
}

template <class T>
void gemm_nn_omp(const T* a, const T* b, T* y, int m, int k, int n) {
  SDML_OMP_FOR
  for (int i = 0; i < m; ++i) gemm_nn_row(a, b, y, i, k, n);
}

template <class T>
void gemm_nn(const T* a, const T* b, T* y, int m, int k, int n) {
  const std::size_t work = std::size_t(m) * k * n;
  if (work >= kParallelGrain) {
    gemm_nn_omp(a, b, y, m, k, n);
  } else {
    gemm_nn_serial(a, b, y, m, k, n);
  }
}

template <class T>
inline void gemm_nt_row(const T* a, const T* b, T* y, int i, int k, int n) {
  const T* ai = a + static_cast<std::size_t>(i) * k;
  T* yi = y + static_cast<std::size_t>(i) * n;
  for (int j = 0; j < n; ++j) {
    const T* bj = b + static_cast<std::size_t>(j) * k;
    T acc = T(0);
    for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
    yi[j] = acc;
  }
}

template <class T>
void gemm_nt_serial(const T* a, const T* b, T* y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) gemm_nt_row(a, b, y, i, k, n);
}

template <class T>
void gemm_nt_omp(const T* a, const T* b, T* y, int m, int k, int n) {
  SDML_OMP_FOR
  for (int i = 0; i < m; ++i) gemm_nt_row(a, b, y, i, k, n);
}

template <class T>
void gemm_nt(const T* a, const T* b, T* y, int m, int k, int n) {
  const std::size_t work = std::size_t(m) * k * n;
  if (work >= kParallelGrain) {
    gemm_nt_omp(a, b, y, m, k, n);
  } else {
    gemm_nt_serial(a, b, y, m, k, n);
  }
}

// y[m,n] = a[k,m]^T * b[k,n]; row i of y reads column i of a.
template <class T>
inline void gemm_tn_row(const T* a, const T* b, T* y, int i, int k, int m, int n) {
  T* yi = y + static_cast<std::size_t>(i) * n;
  for (int j = 0; j < n; ++j) yi[j] = T(0);
  for (int p = 0; p < k; ++p) {
    const T api = a[static_cast<std::size_t>(p) * m + i];
    const T* bp = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) yi[j] += api * bp[j];
  }
}

template <class T>
void gemm_tn_serial(const T* a, const T* b, T* y, int k, int m, int n) {
  for (int i = 0; i < m; ++i) gemm_tn_row(a, b, y, i, k, m, n);
}

template <class T>
void gemm_tn_omp(const T* a, const T* b, T* y, int k, int m, int n) {
  SDML_OMP_FOR
  for (int i = 0; i < m; ++i) gemm_tn_row(a, b, y, i, k, m, n);
}

template <class T>
void gemm_tn(const T* a, const T* b, T* y, int k, int m, int n) {
  const std::size_t work = std::size_t(m) * k * n;
  if (work >= kParallelGrain) {
    gemm_tn_omp(a, b, y, k, m, n);
  } else {
    gemm_tn_serial(a, b, y, k, m, n);
  }
}

// ------------------------------------------------------------- softmax ---
// Max-subtracted row softmax; each row is one independent unit of work.

template <class T>
inline void softmax_row(const T* x, T* y, int i, int n) {
  const T* xi = x + static_cast<std::size_t>(i) * n;
  T* yi = y + static_cast<std::size_t>(i) * n;
  T mx = xi[0];
  for (int j = 1; j < n; ++j) mx = xi[j] > mx ? xi[j] : mx;
  T sum = T(0);
  for (int j = 0; j < n; ++j) {
    yi[j] = std::exp(xi[j] - mx);
    sum += yi[j];
  }
  const T inv = T(1) / sum;
  for (int j = 0; j < n; ++j) yi[j] *= inv;
}

template <class T>
void softmax_rows_serial(const T* x, T* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) softmax_row(x, y, i, cols);
}

template <class T>
void softmax_rows_omp(const T* x, T* y, int rows, int cols) {
  SDML_OMP_FOR
  for (int i = 0; i < rows; ++i) softmax_row(x, y, i, cols);
}

template <class T>
void softmax_rows(const T* x, T* y, int rows, int cols) {
  if (std::size_t(rows) * cols >= kParallelGrain) {
    softmax_rows_omp(x, y, rows, cols);
  } else {
    softmax_rows_serial(x, y, rows, cols);
  }
}

// ---------------------------------------------------------------- conv ---
// 3x3-style direct convolution, stride s, symmetric zero padding, no bias.
// x[ic,h,w], w[oc,ic,kh,kw] -> y[oc,ho,wo]. Output plane rows are the
// parallel units.

template <class T>
inline void conv2d_out_row(const T* x, const T* w, T* y, int oc, int oy, int ic, int h, int wd,
                           int kh, int kw, int stride, int pad, int ho, int wo) {
  T* yrow = y + (static_cast<std::size_t>(oc) * ho + oy) * wo;
  const T* wk = w + static_cast<std::size_t>(oc) * ic * kh * kw;
  for (int ox = 0; ox < wo; ++ox) {
    T acc = T(0);
    for (int c = 0; c < ic; ++c) {
      const T* xc = x + static_cast<std::size_t>(c) * h * wd;
      const T* wc = wk + static_cast<std::size_t>(c) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= wd) continue;
          acc += xc[static_cast<std::size_t>(iy) * wd + ix] * wc[ky * kw + kx];
        }
      }
    }
    yrow[ox] = acc;
  }
}

template <class T>
void conv2d_serial(const T* x, const T* w, T* y, int ic, int h, int wd, int oc, int kh, int kw,
                   int stride, int pad, int ho, int wo) {
  for (int i = 0; i < oc * ho; ++i) {
    conv2d_out_row(x, w, y, i / ho, i % ho, ic, h, wd, kh, kw, stride, pad, ho, wo);
  }
}

template <class T>
void conv2d_omp(const T* x, const T* w, T* y, int ic, int h, int wd, int oc, int kh, int kw,
                int stride, int pad, int ho, int wo) {
  SDML_OMP_FOR
  for (int i = 0; i < oc * ho; ++i) {
    conv2d_out_row(x, w, y, i / ho, i % ho, ic, h, wd, kh, kw, stride, pad, ho, wo);
  }
}

template <class T>
void conv2d(const T* x, const T* w, T* y, int ic, int h, int wd, int oc, int kh, int kw, int stride,
            int pad, int ho, int wo) {
  const std::size_t work = std::size_t(oc) * ho * wo * ic * kh * kw;
  if (work >= kParallelGrain) {
    conv2d_omp(x, w, y, ic, h, wd, oc, kh, kw, stride, pad, ho, wo);
  } else {
    conv2d_serial(x, w, y, ic, h, wd, oc, kh, kw, stride, pad, ho, wo);
  }
}

// Gradient wrt input: one input plane row per unit.
template <class T>
inline void conv2d_dx_row(const T* gy, const T* w, T* gx, int c, int iy, int ic, int h, int wd,
                          int oc, int kh, int kw, int stride, int pad, int ho, int wo) {
  T* gxrow = gx + (static_cast<std::size_t>(c) * h + iy) * wd;
  for (int ix = 0; ix < wd; ++ix) {
    T acc = T(0);
    for (int o = 0; o < oc; ++o) {
      const T* gyo = gy + static_cast<std::size_t>(o) * ho * wo;
      const T* wc = w + (static_cast<std::size_t>(o) * ic + c) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        const int num_y = iy + pad - ky;
        if (num_y < 0 || num_y % stride != 0) continue;
        const int oy = num_y / stride;
        if (oy >= ho) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int num_x = ix + pad - kx;
          if (num_x < 0 || num_x % stride != 0) continue;
          const int ox = num_x / stride;
          if (ox >= wo) continue;
          acc += gyo[static_cast<std::size_t>(oy) * wo + ox] * wc[ky * kw + kx];
        }
      }
    }
    gxrow[ix] += acc;
  }
}

template <class T>
void conv2d_dx(const T* gy, const T* w, T* gx, int ic, int h, int wd, int oc, int kh, int kw,
               int stride, int pad, int ho, int wo) {
  const std::size_t work = std::size_t(ic) * h * wd * oc * kh * kw;
  auto body = [&](int i) {
    conv2d_dx_row(gy, w, gx, i / h, i % h, ic, h, wd, oc, kh, kw, stride, pad, ho, wo);
  };
  if (work >= kParallelGrain) {
    SDML_OMP_FOR
    for (int i = 0; i < ic * h; ++i) body(i);
  } else {
    for (int i = 0; i < ic * h; ++i) body(i);
  }
}

// Gradient wrt weights: one (oc, ic) filter slice per unit.
template <class T>
inline void conv2d_dw_filter(const T* x, const T* gy, T* gw, int o, int c, int ic, int h, int wd,
                             int kh, int kw, int stride, int pad, int ho, int wo) {
  const T* xc = x + static_cast<std::size_t>(c) * h * wd;
  const T* gyo = gy + static_cast<std::size_t>(o) * ho * wo;
  T* gwc = gw + (static_cast<std::size_t>(o) * ic + c) * kh * kw;
  for (int ky = 0; ky < kh; ++ky) {
    for (int kx = 0; kx < kw; ++kx) {
      T acc = T(0);
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int ox = 0; ox < wo; ++ox) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= wd) continue;
          acc += xc[static_cast<std::size_t>(iy) * wd + ix] *
                 gyo[static_cast<std::size_t>(oy) * wo + ox];
        }
      }
      gwc[ky * kw + kx] += acc;
    }
  }
}

template <class T>
void conv2d_dw(const T* x, const T* gy, T* gw, int ic, int h, int wd, int oc, int kh, int kw,
               int stride, int pad, int ho, int wo) {
  const std::size_t work = std::size_t(oc) * ic * kh * kw * ho * wo;
  if (work >= kParallelGrain) {
    SDML_OMP_FOR
    for (int i = 0; i < oc * ic; ++i) {
      conv2d_dw_filter(x, gy, gw, i / ic, i % ic, ic, h, wd, kh, kw, stride, pad, ho, wo);
    }
  } else {
    for (int i = 0; i < oc * ic; ++i) {
      conv2d_dw_filter(x, gy, gw, i / ic, i % ic, ic, h, wd, kh, kw, stride, pad, ho, wo);
    }
  }
}

#undef SDML_OMP_FOR

}  // namespace sdml::kernels
