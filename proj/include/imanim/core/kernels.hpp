#pragma once

#include <cstdint>

// Numeric inner loops. par:: is the OpenMP/SIMD path used everywhere at
// runtime; ref:: is a plain serial implementation kept as the test oracle.
// Both are deterministic: parallel work is split over independent output
// elements only, so results do not depend on thread count.
namespace imanim::kernels {

namespace ref {

// c (m x n) = op(a) * op(b) + beta * c, row-major contiguous
void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          const float* a, const float* b, float* c, float beta);

void softmax_rows(float* x, int64_t rows, int cols);

// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row
void layer_norm(const float* x, const float* gamma, const float* beta,
                float* y, int64_t rows, int cols, float eps);

void gelu(const float* x, float* y, int64_t n);

// q, k, v: (l x d) each, already per-head; out: (l x d); probs: (l x l)
void attention_head(const float* q, const float* k, const float* v,
                    float* probs, float* out, int lq, int lk, int d);

}  // namespace ref

namespace par {

void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          const float* a, const float* b, float* c, float beta);

void softmax_rows(float* x, int64_t rows, int cols);

void layer_norm(const float* x, const float* gamma, const float* beta,
                float* y, int64_t rows, int cols, float eps);

void gelu(const float* x, float* y, int64_t n);

void attention_head(const float* q, const float* k, const float* v,
                    float* probs, float* out, int lq, int lk, int d);

}  // namespace par

}  // namespace imanim::kernels
