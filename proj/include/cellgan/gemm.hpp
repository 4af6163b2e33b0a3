#pragma once

#include <cblas.h>

#include "cellgan/tensor.hpp"

namespace cellgan {

/// Row-major C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvGeom {
    int in_c, in_h, in_w;
    int k, stride, pad;
    int out_h() const { return (in_h + 2 * pad - k) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - k) / stride + 1; }
    int patch() const { return in_c * k * k; }
};

/// One sample: x [C,H,W] -> col [C*k*k, out_h*out_w], zero padding.
template <typename T>
inline void im2col(const T* x, const ConvGeom& g, T* col) {
    const int oh = g.out_h(), ow = g.out_w();
    T* out = col;
    for (int c = 0; c < g.in_c; ++c) {
        const T* xc = x + static_cast<size_t>(c) * g.in_h * g.in_w;
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                for (int i = 0; i < oh; ++i) {
                    const int si = i * g.stride + ki - g.pad;
                    if (si < 0 || si >= g.in_h) {
                        for (int j = 0; j < ow; ++j) *out++ = T(0);
                        continue;
                    }
                    const T* row = xc + static_cast<size_t>(si) * g.in_w;
                    for (int j = 0; j < ow; ++j) {
                        const int sj = j * g.stride + kj - g.pad;
                        *out++ = (sj >= 0 && sj < g.in_w) ? row[sj] : T(0);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add col [C*k*k, out_h*out_w] into dx [C,H,W].
template <typename T>
inline void col2im_add(const T* col, const ConvGeom& g, T* dx) {
    const int oh = g.out_h(), ow = g.out_w();
    const T* in = col;
    for (int c = 0; c < g.in_c; ++c) {
        T* xc = dx + static_cast<size_t>(c) * g.in_h * g.in_w;
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                for (int i = 0; i < oh; ++i) {
                    const int si = i * g.stride + ki - g.pad;
                    if (si < 0 || si >= g.in_h) {
                        in += ow;
                        continue;
                    }
                    T* row = xc + static_cast<size_t>(si) * g.in_w;
                    for (int j = 0; j < ow; ++j) {
                        const int sj = j * g.stride + kj - g.pad;
                        if (sj >= 0 && sj < g.in_w) row[sj] += *in;
                        ++in;
                    }
                }
            }
        }
    }
}

}  // namespace cellgan
