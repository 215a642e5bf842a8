#pragma once

// Raw dense-array kernels shared by the tape's forward evaluation and replay.
// All loops have a fixed traversal order so results are bit-reproducible.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace advlab::ad::detail {

struct ConvDims {
    std::size_t n, cin, h, w;   // input  [n, cin, h, w]
    std::size_t cout, k;        // kernel [cout, cin, k, k]
    std::size_t oh, ow;         // output [n, cout, oh, ow], valid, stride 1
};

// out[n,o,i,j] = sum_{c,p,q} x[n,c,i+p,j+q] * w[o,c,p,q] (+ b[o])
template <class Real>
void conv2d_forward(Real* out, const Real* x, const Real* w, const Real* b,
                    const ConvDims& d) {
    const std::size_t xhw = d.h * d.w, ohw = d.oh * d.ow;
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t o = 0; o < d.cout; ++o) {
            Real* on = out + (n * d.cout + o) * ohw;
            const Real bias = b ? b[o] : Real(0);
            for (std::size_t t = 0; t < ohw; ++t) on[t] = bias;
            for (std::size_t c = 0; c < d.cin; ++c) {
                const Real* xn = x + (n * d.cin + c) * xhw;
                const Real* wk = w + (o * d.cin + c) * d.k * d.k;
                for (std::size_t p = 0; p < d.k; ++p) {
                    for (std::size_t q = 0; q < d.k; ++q) {
                        const Real wv = wk[p * d.k + q];
                        for (std::size_t i = 0; i < d.oh; ++i) {
                            const Real* xr = xn + (i + p) * d.w + q;
                            Real* orow = on + i * d.ow;
                            for (std::size_t j = 0; j < d.ow; ++j)
                                orow[j] += wv * xr[j];
                        }
                    }
                }
            }
        }
    }
}

// dx[n,c,i+p,j+q] += g[n,o,i,j] * w[o,c,p,q]
template <class Real>
void conv2d_dgrad(Real* dx, const Real* g, const Real* w, const ConvDims& d) {
    const std::size_t xhw = d.h * d.w, ohw = d.oh * d.ow;
    for (std::size_t t = 0; t < d.n * d.cin * xhw; ++t) dx[t] = Real(0);
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t o = 0; o < d.cout; ++o) {
            const Real* gn = g + (n * d.cout + o) * ohw;
            for (std::size_t c = 0; c < d.cin; ++c) {
                Real* xn = dx + (n * d.cin + c) * xhw;
                const Real* wk = w + (o * d.cin + c) * d.k * d.k;
                for (std::size_t p = 0; p < d.k; ++p) {
                    for (std::size_t q = 0; q < d.k; ++q) {
                        const Real wv = wk[p * d.k + q];
                        for (std::size_t i = 0; i < d.oh; ++i) {
                            const Real* gr = gn + i * d.ow;
                            Real* xr = xn + (i + p) * d.w + q;
                            for (std::size_t j = 0; j < d.ow; ++j)
                                xr[j] += wv * gr[j];
                        }
                    }
                }
            }
        }
    }
}

// dw[o,c,p,q] = sum_{n,i,j} x[n,c,i+p,j+q] * g[n,o,i,j]
template <class Real>
void conv2d_wgrad(Real* dw, const Real* x, const Real* g, const ConvDims& d) {
    const std::size_t xhw = d.h * d.w, ohw = d.oh * d.ow;
    for (std::size_t t = 0; t < d.cout * d.cin * d.k * d.k; ++t) dw[t] = Real(0);
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t o = 0; o < d.cout; ++o) {
            const Real* gn = g + (n * d.cout + o) * ohw;
            for (std::size_t c = 0; c < d.cin; ++c) {
                const Real* xn = x + (n * d.cin + c) * xhw;
                Real* wk = dw + (o * d.cin + c) * d.k * d.k;
                for (std::size_t p = 0; p < d.k; ++p) {
                    for (std::size_t q = 0; q < d.k; ++q) {
                        Real acc = 0;
                        for (std::size_t i = 0; i < d.oh; ++i) {
                            const Real* xr = xn + (i + p) * d.w + q;
                            const Real* gr = gn + i * d.ow;
                            for (std::size_t j = 0; j < d.ow; ++j)
                                acc += xr[j] * gr[j];
                        }
                        wk[p * d.k + q] += acc;
                    }
                }
            }
        }
    }
}

// c[m,n] = sum_k a[m,k] * b[k,n], row-major, overwrite.
template <class Real>
void matmul(Real* c, const Real* a, const Real* b, std::size_t M, std::size_t K,
            std::size_t N) {
    for (std::size_t m = 0; m < M; ++m) {
        Real* cr = c + m * N;
        for (std::size_t n = 0; n < N; ++n) cr[n] = Real(0);
        const Real* ar = a + m * K;
        for (std::size_t k = 0; k < K; ++k) {
            const Real av = ar[k];
            const Real* br = b + k * N;
            for (std::size_t n = 0; n < N; ++n) cr[n] += av * br[n];
        }
    }
}

// 2x2 max pooling, stride 2. argmax holds the flat source index of each
// window maximum (first occurrence on ties, scan order (0,0),(0,1),(1,0),(1,1)).
template <class Real>
void maxpool2_forward(Real* out, std::int64_t* argmax, const Real* x,
                      std::size_t nc, std::size_t h, std::size_t w) {
    const std::size_t oh = h / 2, ow = w / 2;
    for (std::size_t m = 0; m < nc; ++m) {
        const Real* xm = x + m * h * w;
        const std::size_t base = m * h * w;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (2 * i) * w + 2 * j;
                Real bv = xm[best];
                const std::size_t cands[3] = {(2 * i) * w + 2 * j + 1,
                                              (2 * i + 1) * w + 2 * j,
                                              (2 * i + 1) * w + 2 * j + 1};
                for (std::size_t c : cands) {
                    if (xm[c] > bv) {
                        bv = xm[c];
                        best = c;
                    }
                }
                out[m * oh * ow + i * ow + j] = bv;
                argmax[m * oh * ow + i * ow + j] =
                    static_cast<std::int64_t>(base + best);
            }
        }
    }
}

}  // namespace advlab::ad::detail
