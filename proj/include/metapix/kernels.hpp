#pragma once

// Raw numeric kernels behind the autodiff primitives. The convolution family
// dominates runtime, so each of its kernels exists twice: a serial reference
// and an OpenMP version. The parallel versions split work only across
// independent output slots and keep the per-output accumulation order
// identical to the serial code, so both produce bit-identical results.
// tools/bench_kernels compares their throughput; tests/test_kernels checks
// the bitwise match.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "metapix/common.hpp"

namespace metapix::kernels {

enum class Backend { Serial, Parallel };

// Process-wide backend switch. Defaults to Parallel when built with OpenMP.
Backend& backend();

inline bool parallel_enabled() {
#ifdef _OPENMP
    return backend() == Backend::Parallel;
#else
    return false;
#endif
}

// ---------------------------------------------------------------------------
// conv2d family: 3x3 kernel, zero padding 1, stride 1 or 2.
//   y[b,co,i,j] = sum_{ci,u,v} w[co,ci,u,v] * x[b,ci, i*s+u-1, j*s+v-1]
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int stride) { return (in - 1) / stride + 1; }

namespace detail {

// One (b, co) output plane. Accumulation order: ci, u, v appended onto y.
template <class Real>
inline void conv_fwd_plane(const Real* x, const Real* w, Real* y, int ci_n, int h, int wd,
                           int ho, int wo, int stride) {
    for (long k = 0; k < long(ho) * wo; ++k) y[k] = Real(0);
    for (int ci = 0; ci < ci_n; ++ci) {
        const Real* xp = x + long(ci) * h * wd;
        for (int u = 0; u < 3; ++u) {
            for (int v = 0; v < 3; ++v) {
                const Real wk = w[(long(ci) * 3 + u) * 3 + v];
                if (wk == Real(0)) continue;
                if (stride == 1) {
                    // j + v - 1 in [0, wd)
                    const int j_lo = std::max(0, 1 - v), j_hi = std::min(wo, wd + 1 - v);
                    for (int i = 0; i < ho; ++i) {
                        const int ih = i + u - 1;
                        if (ih < 0 || ih >= h) continue;
                        Real* yrow = y + long(i) * wo;
                        const Real* xrow = xp + long(ih) * wd + (v - 1);
                        for (int j = j_lo; j < j_hi; ++j) yrow[j] += wk * xrow[j];
                    }
                } else {
                    for (int i = 0; i < ho; ++i) {
                        const int ih = i * stride + u - 1;
                        if (ih < 0 || ih >= h) continue;
                        Real* yrow = y + long(i) * wo;
                        const Real* xrow = xp + long(ih) * wd;
                        for (int j = 0; j < wo; ++j) {
                            const int iw = j * stride + v - 1;
                            if (iw < 0 || iw >= wd) continue;
                            yrow[j] += wk * xrow[iw];
                        }
                    }
                }
            }
        }
    }
}

// One (b, ci) input-gradient plane. Order: co, u, v.
template <class Real>
inline void conv_dx_plane(const Real* g, const Real* w, Real* dx, int co_n, int ci_n, int ci,
                          int h, int wd, int ho, int wo, int stride) {
    for (long k = 0; k < long(h) * wd; ++k) dx[k] = Real(0);
    for (int co = 0; co < co_n; ++co) {
        const Real* gp = g + long(co) * ho * wo;
        const Real* wp = w + (long(co) * ci_n + ci) * 9;
        for (int u = 0; u < 3; ++u) {
            for (int v = 0; v < 3; ++v) {
                const Real wk = wp[u * 3 + v];
                if (wk == Real(0)) continue;
                if (stride == 1) {
                    // b + 1 - v in [0, wo)
                    const int b_lo = std::max(0, v - 1), b_hi = std::min(wd, wo + v - 1);
                    for (int a = 0; a < h; ++a) {
                        const int i = a + 1 - u;
                        if (i < 0 || i >= ho) continue;
                        Real* drow = dx + long(a) * wd;
                        const Real* grow = gp + long(i) * wo + (1 - v);
                        for (int b2 = b_lo; b2 < b_hi; ++b2) drow[b2] += wk * grow[b2];
                    }
                } else {
                    for (int a = 0; a < h; ++a) {
                        const int t = a + 1 - u;
                        if (t < 0 || t % stride != 0) continue;
                        const int i = t / stride;
                        if (i >= ho) continue;
                        Real* drow = dx + long(a) * wd;
                        const Real* grow = gp + long(i) * wo;
                        for (int b2 = 0; b2 < wd; ++b2) {
                            const int tv = b2 + 1 - v;
                            if (tv < 0 || tv % stride != 0) continue;
                            const int j = tv / stride;
                            if (j >= wo) continue;
                            drow[b2] += wk * grow[j];
                        }
                    }
                }
            }
        }
    }
}

// One (co, ci) weight-gradient tile [3,3]. Order: b, i, j.
template <class Real>
inline void conv_dw_tile(const Real* g, const Real* x, Real* dw, int b_n, int ci_n, int co_n,
                         int co, int ci, int h, int wd, int ho, int wo, int stride) {
    for (int k = 0; k < 9; ++k) dw[k] = Real(0);
    for (int u = 0; u < 3; ++u) {
        for (int v = 0; v < 3; ++v) {
            Real acc = Real(0);
            for (int b = 0; b < b_n; ++b) {
                const Real* gp = g + (long(b) * co_n + co) * ho * wo;
                const Real* xp = x + (long(b) * ci_n + ci) * h * wd;
                if (stride == 1) {
                    // 4-lane partial sums; the lane layout is part of the
                    // kernel's fixed accumulation order.
                    const int j_lo = std::max(0, 1 - v), j_hi = std::min(wo, wd + 1 - v);
                    Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
                    for (int i = 0; i < ho; ++i) {
                        const int ih = i + u - 1;
                        if (ih < 0 || ih >= h) continue;
                        const Real* grow = gp + long(i) * wo;
                        const Real* xrow = xp + long(ih) * wd + (v - 1);
                        int j = j_lo;
                        for (; j + 4 <= j_hi; j += 4) {
                            s0 += grow[j] * xrow[j];
                            s1 += grow[j + 1] * xrow[j + 1];
                            s2 += grow[j + 2] * xrow[j + 2];
                            s3 += grow[j + 3] * xrow[j + 3];
                        }
                        for (; j < j_hi; ++j) s0 += grow[j] * xrow[j];
                    }
                    acc += ((s0 + s1) + (s2 + s3));
                } else {
                    for (int i = 0; i < ho; ++i) {
                        const int ih = i * stride + u - 1;
                        if (ih < 0 || ih >= h) continue;
                        const Real* grow = gp + long(i) * wo;
                        const Real* xrow = xp + long(ih) * wd;
                        for (int j = 0; j < wo; ++j) {
                            const int iw = j * stride + v - 1;
                            if (iw < 0 || iw >= wd) continue;
                            acc += grow[j] * xrow[iw];
                        }
                    }
                }
            }
            dw[u * 3 + v] = acc;
        }
    }
}

}  // namespace detail

template <class Real>
void conv2d_fwd_serial(const Real* x, const Real* w, Real* y, int b_n, int ci_n, int h, int wd,
                       int co_n, int stride) {
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    for (int b = 0; b < b_n; ++b)
        for (int co = 0; co < co_n; ++co)
            detail::conv_fwd_plane(x + long(b) * ci_n * h * wd, w + long(co) * ci_n * 9,
                                   y + (long(b) * co_n + co) * ho * wo, ci_n, h, wd, ho, wo,
                                   stride);
}

template <class Real>
void conv2d_fwd_parallel(const Real* x, const Real* w, Real* y, int b_n, int ci_n, int h, int wd,
                         int co_n, int stride) {
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    const long planes = long(b_n) * co_n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long p = 0; p < planes; ++p) {
        const int b = int(p / co_n), co = int(p % co_n);
        detail::conv_fwd_plane(x + long(b) * ci_n * h * wd, w + long(co) * ci_n * 9,
                               y + p * ho * wo, ci_n, h, wd, ho, wo, stride);
    }
}

template <class Real>
void conv2d_fwd(const Real* x, const Real* w, Real* y, int b_n, int ci_n, int h, int wd, int co_n,
                int stride) {
    if (parallel_enabled())
        conv2d_fwd_parallel(x, w, y, b_n, ci_n, h, wd, co_n, stride);
    else
        conv2d_fwd_serial(x, w, y, b_n, ci_n, h, wd, co_n, stride);
}

template <class Real>
void conv2d_dx_serial(const Real* g, const Real* w, Real* dx, int b_n, int ci_n, int h, int wd,
                      int co_n, int stride) {
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    for (int b = 0; b < b_n; ++b)
        for (int ci = 0; ci < ci_n; ++ci)
            detail::conv_dx_plane(g + long(b) * co_n * ho * wo, w,
                                  dx + (long(b) * ci_n + ci) * h * wd, co_n, ci_n, ci, h, wd, ho,
                                  wo, stride);
}

template <class Real>
void conv2d_dx_parallel(const Real* g, const Real* w, Real* dx, int b_n, int ci_n, int h, int wd,
                        int co_n, int stride) {
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    const long planes = long(b_n) * ci_n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long p = 0; p < planes; ++p) {
        const int b = int(p / ci_n), ci = int(p % ci_n);
        detail::conv_dx_plane(g + long(b) * co_n * ho * wo, w, dx + p * h * wd, co_n, ci_n, ci, h,
                              wd, ho, wo, stride);
    }
}

template <class Real>
void conv2d_dx(const Real* g, const Real* w, Real* dx, int b_n, int ci_n, int h, int wd, int co_n,
               int stride) {
    if (parallel_enabled())
        conv2d_dx_parallel(g, w, dx, b_n, ci_n, h, wd, co_n, stride);
    else
        conv2d_dx_serial(g, w, dx, b_n, ci_n, h, wd, co_n, stride);
}

template <class Real>
void conv2d_dw_serial(const Real* g, const Real* x, Real* dw, int b_n, int ci_n, int h, int wd,
                      int co_n, int stride) {
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    for (int co = 0; co < co_n; ++co)
        for (int ci = 0; ci < ci_n; ++ci)
            detail::conv_dw_tile(g, x, dw + (long(co) * ci_n + ci) * 9, b_n, ci_n, co_n, co, ci, h,
                                 wd, ho, wo, stride);
}

template <class Real>
void conv2d_dw_parallel(const Real* g, const Real* x, Real* dw, int b_n, int ci_n, int h, int wd,
                        int co_n, int stride) {
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    const long tiles = long(co_n) * ci_n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long p = 0; p < tiles; ++p) {
        const int co = int(p / ci_n), ci = int(p % ci_n);
        detail::conv_dw_tile(g, x, dw + p * 9, b_n, ci_n, co_n, co, ci, h, wd, ho, wo, stride);
    }
}

template <class Real>
void conv2d_dw(const Real* g, const Real* x, Real* dw, int b_n, int ci_n, int h, int wd, int co_n,
               int stride) {
    if (parallel_enabled())
        conv2d_dw_parallel(g, x, dw, b_n, ci_n, h, wd, co_n, stride);
    else
        conv2d_dw_serial(g, x, dw, b_n, ci_n, h, wd, co_n, stride);
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

// 2x2 max pooling, stride 2. Ties break to the first window element in
// (0,0),(0,1),(1,0),(1,1) order. idx stores the plane-local argmax offset.
template <class Real>
void maxpool2x2(const Real* x, Real* y, std::int32_t* idx, int planes, int h, int wd) {
    const int ho = h / 2, wo = wd / 2;
    for (int p = 0; p < planes; ++p) {
        const Real* xp = x + long(p) * h * wd;
        Real* yp = y + long(p) * ho * wo;
        std::int32_t* ip = idx + long(p) * ho * wo;
        for (int i = 0; i < ho; ++i) {
            for (int j = 0; j < wo; ++j) {
                int best = (2 * i) * wd + 2 * j;
                Real bv = xp[best];
                const int cand[3] = {(2 * i) * wd + 2 * j + 1, (2 * i + 1) * wd + 2 * j,
                                     (2 * i + 1) * wd + 2 * j + 1};
                for (int c : cand) {
                    if (xp[c] > bv) {
                        bv = xp[c];
                        best = c;
                    }
                }
                yp[long(i) * wo + j] = bv;
                ip[long(i) * wo + j] = best;
            }
        }
    }
}

template <class Real>
void maxunpool2x2(const Real* g, const std::int32_t* idx, Real* dx, int planes, int h, int wd) {
    const int ho = h / 2, wo = wd / 2;
    for (long k = 0; k < long(planes) * h * wd; ++k) dx[k] = Real(0);
    for (int p = 0; p < planes; ++p) {
        const Real* gp = g + long(p) * ho * wo;
        const std::int32_t* ip = idx + long(p) * ho * wo;
        Real* dp = dx + long(p) * h * wd;
        for (long k = 0; k < long(ho) * wo; ++k) dp[ip[k]] += gp[k];
    }
}

template <class Real>
void pool_gather(const Real* t, const std::int32_t* idx, Real* y, int planes, int h, int wd) {
    const int ho = h / 2, wo = wd / 2;
    for (int p = 0; p < planes; ++p) {
        const Real* tp = t + long(p) * h * wd;
        const std::int32_t* ip = idx + long(p) * ho * wo;
        Real* yp = y + long(p) * ho * wo;
        for (long k = 0; k < long(ho) * wo; ++k) yp[k] = tp[ip[k]];
    }
}

template <class Real>
void upsample2x(const Real* x, Real* y, int planes, int h, int wd) {
    const int ho = h * 2, wo = wd * 2;
    for (int p = 0; p < planes; ++p) {
        const Real* xp = x + long(p) * h * wd;
        Real* yp = y + long(p) * ho * wo;
        for (int i = 0; i < ho; ++i) {
            const Real* xrow = xp + long(i / 2) * wd;
            Real* yrow = yp + long(i) * wo;
            for (int j = 0; j < wo; ++j) yrow[j] = xrow[j / 2];
        }
    }
}

// Adjoint of upsample2x: each output sums its 2x2 block in fixed order.
template <class Real>
void downsample2x_sum(const Real* x, Real* y, int planes, int h, int wd) {
    const int ho = h / 2, wo = wd / 2;
    for (int p = 0; p < planes; ++p) {
        const Real* xp = x + long(p) * h * wd;
        Real* yp = y + long(p) * ho * wo;
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
                yp[long(i) * wo + j] = (xp[(2L * i) * wd + 2 * j] + xp[(2L * i) * wd + 2 * j + 1]) +
                                       (xp[(2L * i + 1) * wd + 2 * j] +
                                        xp[(2L * i + 1) * wd + 2 * j + 1]);
    }
}

// ---------------------------------------------------------------------------
// channel-axis reductions for [B,C,H,W]
// ---------------------------------------------------------------------------

template <class Real>
void logsoftmax_channel(const Real* x, Real* y, int b_n, int c_n, long hw) {
    for (int b = 0; b < b_n; ++b) {
        const Real* xb = x + long(b) * c_n * hw;
        Real* yb = y + long(b) * c_n * hw;
        for (long k = 0; k < hw; ++k) {
            Real m = xb[k];
            for (int c = 1; c < c_n; ++c) m = std::max(m, xb[long(c) * hw + k]);
            Real s = Real(0);
            for (int c = 0; c < c_n; ++c) s += std::exp(xb[long(c) * hw + k] - m);
            const Real lse = m + std::log(s);
            for (int c = 0; c < c_n; ++c) yb[long(c) * hw + k] = xb[long(c) * hw + k] - lse;
        }
    }
}

template <class Real>
void channel_sum(const Real* x, Real* y, int b_n, int c_n, long hw) {
    for (int b = 0; b < b_n; ++b) {
        const Real* xb = x + long(b) * c_n * hw;
        Real* yb = y + long(b) * hw;
        for (long k = 0; k < hw; ++k) {
            Real s = Real(0);
            for (int c = 0; c < c_n; ++c) s += xb[long(c) * hw + k];
            yb[k] = s;
        }
    }
}

template <class Real>
void channel_broadcast(const Real* x, Real* y, int b_n, int c_n, long hw) {
    for (int b = 0; b < b_n; ++b) {
        const Real* xb = x + long(b) * hw;
        Real* yb = y + long(b) * c_n * hw;
        for (int c = 0; c < c_n; ++c)
            for (long k = 0; k < hw; ++k) yb[long(c) * hw + k] = xb[k];
    }
}

template <class Real>
void bias_sum(const Real* x, Real* y, int b_n, int c_n, long hw) {
    for (int c = 0; c < c_n; ++c) y[c] = Real(0);
    for (int b = 0; b < b_n; ++b)
        for (int c = 0; c < c_n; ++c) {
            const Real* xp = x + (long(b) * c_n + c) * hw;
            Real acc = Real(0);
            for (long k = 0; k < hw; ++k) acc += xp[k];
            y[c] += acc;
        }
}

template <class Real>
void add_bias(const Real* x, const Real* bias, Real* y, int b_n, int c_n, long hw) {
    for (int b = 0; b < b_n; ++b)
        for (int c = 0; c < c_n; ++c) {
            const Real* xp = x + (long(b) * c_n + c) * hw;
            Real* yp = y + (long(b) * c_n + c) * hw;
            const Real bv = bias[c];
            for (long k = 0; k < hw; ++k) yp[k] = xp[k] + bv;
        }
}

template <class Real>
void gather_channel(const Real* x, const std::int32_t* idx, Real* y, int b_n, int c_n, long hw) {
    for (int b = 0; b < b_n; ++b) {
        const Real* xb = x + long(b) * c_n * hw;
        const std::int32_t* ib = idx + long(b) * hw;
        Real* yb = y + long(b) * hw;
        for (long k = 0; k < hw; ++k) yb[k] = xb[long(ib[k]) * hw + k];
    }
}

template <class Real>
void scatter_channel(const Real* x, const std::int32_t* idx, Real* y, int b_n, int c_n, long hw) {
    for (long k = 0; k < long(b_n) * c_n * hw; ++k) y[k] = Real(0);
    for (int b = 0; b < b_n; ++b) {
        const Real* xb = x + long(b) * hw;
        const std::int32_t* ib = idx + long(b) * hw;
        Real* yb = y + long(b) * c_n * hw;
        for (long k = 0; k < hw; ++k) yb[long(ib[k]) * hw + k] = xb[k];
    }
}

}  // namespace metapix::kernels
