#include "imanim/core/kernels.hpp"

#include <Eigen/Core>

#include <cmath>

namespace imanim::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

inline float gelu_tanh(float x) {
    // tanh approximation
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    float x3 = x * x * x;
    return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x3)));
}

}  // namespace

namespace ref {

void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          const float* a, const float* b, float* c, float beta) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                float av = trans_a ? a[(int64_t)p * m + i] : a[(int64_t)i * k + p];
                float bv = trans_b ? b[(int64_t)j * k + p] : b[(int64_t)p * n + j];
                acc += (double)av * bv;
            }
            int64_t idx = (int64_t)i * n + j;
            c[idx] = (float)acc + (beta == 0.0f ? 0.0f : beta * c[idx]);
        }
    }
}

void softmax_rows(float* x, int64_t rows, int cols) {
    for (int64_t r = 0; r < rows; ++r) {
        float* row = x + r * cols;
        float mx = row[0];
        for (int j = 1; j < cols; ++j) mx = row[j] > mx ? row[j] : mx;
        float sum = 0.0f;
        for (int j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        float inv = 1.0f / sum;
        for (int j = 0; j < cols; ++j) row[j] *= inv;
    }
}

void layer_norm(const float* x, const float* gamma, const float* beta,
                float* y, int64_t rows, int cols, float eps) {
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        float* yr = y + r * cols;
        float mean = 0.0f;
        for (int j = 0; j < cols; ++j) mean += xr[j];
        mean /= cols;
        float var = 0.0f;
        for (int j = 0; j < cols; ++j) {
            float d = xr[j] - mean;
            var += d * d;
        }
        var /= cols;
        float rstd = 1.0f / std::sqrt(var + eps);
        for (int j = 0; j < cols; ++j)
            yr[j] = gamma[j] * (xr[j] - mean) * rstd + beta[j];
    }
}

void gelu(const float* x, float* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = gelu_tanh(x[i]);
}

void attention_head(const float* q, const float* k, const float* v,
                    float* probs, float* out, int lq, int lk, int d) {
    float scale = 1.0f / std::sqrt((float)d);
    gemm(false, true, lq, lk, d, q, k, probs, 0.0f);
    for (int64_t i = 0; i < (int64_t)lq * lk; ++i) probs[i] *= scale;
    softmax_rows(probs, lq, lk);
    gemm(false, false, lq, d, lk, probs, v, out, 0.0f);
}

}  // namespace ref

namespace par {

void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          const float* a, const float* b, float* c, float beta) {
    MapM cm(c, m, n);
    if (beta != 0.0f && beta != 1.0f) cm *= beta;
    if (!trans_a && !trans_b) {
        CMapM am(a, m, k), bm(b, k, n);
        if (beta == 0.0f) cm.noalias() = am * bm;
        else cm.noalias() += am * bm;
    } else if (trans_a && !trans_b) {
        CMapM am(a, k, m), bm(b, k, n);
        if (beta == 0.0f) cm.noalias() = am.transpose() * bm;
        else cm.noalias() += am.transpose() * bm;
    } else if (!trans_a && trans_b) {
        CMapM am(a, m, k), bm(b, n, k);
        if (beta == 0.0f) cm.noalias() = am * bm.transpose();
        else cm.noalias() += am * bm.transpose();
    } else {
        CMapM am(a, k, m), bm(b, n, k);
        if (beta == 0.0f) cm.noalias() = am.transpose() * bm.transpose();
        else cm.noalias() += am.transpose() * bm.transpose();
    }
}

void softmax_rows(float* x, int64_t rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        float* row = x + r * cols;
        float mx = row[0];
        for (int j = 1; j < cols; ++j) mx = row[j] > mx ? row[j] : mx;
        float sum = 0.0f;
        for (int j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        float inv = 1.0f / sum;
        for (int j = 0; j < cols; ++j) row[j] *= inv;
    }
}

void layer_norm(const float* x, const float* gamma, const float* beta,
                float* y, int64_t rows, int cols, float eps) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        float* yr = y + r * cols;
        float mean = 0.0f;
        for (int j = 0; j < cols; ++j) mean += xr[j];
        mean /= cols;
        float var = 0.0f;
        for (int j = 0; j < cols; ++j) {
            float d = xr[j] - mean;
            var += d * d;
        }
        var /= cols;
        float rstd = 1.0f / std::sqrt(var + eps);
        for (int j = 0; j < cols; ++j)
            yr[j] = gamma[j] * (xr[j] - mean) * rstd + beta[j];
    }
}

void gelu(const float* x, float* y, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = gelu_tanh(x[i]);
}

void attention_head(const float* q, const float* k, const float* v,
                    float* probs, float* out, int lq, int lk, int d) {
    float scale = 1.0f / std::sqrt((float)d);
    gemm(false, true, lq, lk, d, q, k, probs, 0.0f);
    MapM pm(probs, lq, lk);
    pm *= scale;
    softmax_rows(probs, lq, lk);
    gemm(false, false, lq, d, lk, probs, v, out, 0.0f);
}

}  // namespace par

}  // namespace imanim::kernels
