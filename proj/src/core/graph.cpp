#include "imanim/core/graph.hpp"

#include "imanim/core/kernels.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace imanim {

namespace k = kernels::par;

Var make_param(const std::string& name, Tensor init) {
    auto n = std::make_shared<Node>();
    n->val = std::move(init);
    n->requires_grad = true;
    n->is_param = true;
    n->name = name;
    return n;
}

Var make_input(Tensor val) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    return n;
}

Var Tape::make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bwd) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
    for (const auto& p : n->parents)
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    nodes_.push_back(n);
    return n;
}

void Tape::backward(const Var& loss) {
    if (loss->val.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    loss->ensure_grad().data[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.requires_grad || !n.has_grad() || !n.backward_fn) continue;
        n.backward_fn(n);
    }
}

namespace {

inline bool wants(const Var& v) { return v && v->requires_grad; }

inline int64_t rows_of(const Tensor& t, int last) {
    return t.numel() / last;
}

void accum(Tensor& dst, const Tensor& src) {
    float* d = dst.ptr();
    const float* s = src.ptr();
    int64_t n = dst.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

}  // namespace

// ---- linear ----------------------------------------------------------

Var linear(Tape& tp, Var x, Var w, Var b) {
    int din = w->val.shape[0], dout = w->val.shape[1];
    if (x->val.dim(-1) != din)
        throw std::invalid_argument("linear: width mismatch " + x->val.shape_str());
    int64_t rows = rows_of(x->val, din);
    std::vector<int> out_shape = x->val.shape;
    out_shape.back() = dout;
    Tensor y(out_shape);
    k::gemm(false, false, (int)rows, dout, din, x->val.ptr(), w->val.ptr(), y.ptr(), 0.0f);
    if (b) {
        float* yp = y.ptr();
        const float* bp = b->val.ptr();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < dout; ++j) yp[r * dout + j] += bp[j];
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return tp.make(std::move(y), std::move(parents), [x, w, b, rows, din, dout](Node& n) {
        const float* gy = n.grad.ptr();
        if (wants(x))
            k::gemm(false, true, (int)rows, din, dout, gy, w->val.ptr(),
                    x->ensure_grad().ptr(), 1.0f);
        if (wants(w))
            k::gemm(true, false, din, dout, (int)rows, x->val.ptr(), gy,
                    w->ensure_grad().ptr(), 1.0f);
        if (b && wants(b)) {
            float* gb = b->ensure_grad().ptr();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < dout; ++j) gb[j] += gy[r * dout + j];
        }
    });
}

// ---- elementwise -----------------------------------------------------

Var add(Tape& tp, Var a, Var b) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument("add: shape mismatch");
    Tensor y = a->val;
    accum(y, b->val);
    return tp.make(std::move(y), {a, b}, [a, b](Node& n) {
        if (wants(a)) accum(a->ensure_grad(), n.grad);
        if (wants(b)) accum(b->ensure_grad(), n.grad);
    });
}

Var sub(Tape& tp, Var a, Var b) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument("sub: shape mismatch");
    Tensor y = a->val;
    float* yp = y.ptr();
    const float* bp = b->val.ptr();
    for (int64_t i = 0; i < y.numel(); ++i) yp[i] -= bp[i];
    return tp.make(std::move(y), {a, b}, [a, b](Node& n) {
        if (wants(a)) accum(a->ensure_grad(), n.grad);
        if (wants(b)) {
            float* gb = b->ensure_grad().ptr();
            const float* g = n.grad.ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var scale(Tape& tp, Var x, float s) {
    Tensor y = x->val;
    for (auto& v : y.data) v *= s;
    return tp.make(std::move(y), {x}, [x, s](Node& n) {
        if (!wants(x)) return;
        float* gx = x->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += s * g[i];
    });
}

Var add_scaled(Tape& tp, Var a, float sa, Var b, float sb) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument("add_scaled: shape mismatch");
    Tensor y = a->val;
    float* yp = y.ptr();
    const float* bp = b->val.ptr();
    for (int64_t i = 0; i < y.numel(); ++i) yp[i] = sa * yp[i] + sb * bp[i];
    return tp.make(std::move(y), {a, b}, [a, b, sa, sb](Node& n) {
        const float* g = n.grad.ptr();
        if (wants(a)) {
            float* ga = a->ensure_grad().ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += sa * g[i];
        }
        if (wants(b)) {
            float* gb = b->ensure_grad().ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += sb * g[i];
        }
    });
}

Var add_rows_pattern(Tape& tp, Var x, Var table, std::vector<int> row_idx) {
    int B = x->val.shape[0], L = x->val.shape[1], D = x->val.shape[2];
    if ((int)row_idx.size() != L)
        throw std::invalid_argument("add_rows_pattern: index count != token count");
    if (table->val.shape[1] != D)
        throw std::invalid_argument("add_rows_pattern: width mismatch");
    Tensor y = x->val;
    float* yp = y.ptr();
    const float* tb = table->val.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t bl = 0; bl < (int64_t)B * L; ++bl) {
        int l = (int)(bl % L);
        const float* row = tb + (int64_t)row_idx[l] * D;
        float* dst = yp + bl * D;
        for (int j = 0; j < D; ++j) dst[j] += row[j];
    }
    auto idx = std::make_shared<std::vector<int>>(std::move(row_idx));
    return tp.make(std::move(y), {x, table}, [x, table, idx, B, L, D](Node& n) {
        const float* g = n.grad.ptr();
        if (wants(x)) accum(x->ensure_grad(), n.grad);
        if (wants(table)) {
            float* gt = table->ensure_grad().ptr();
            for (int b = 0; b < B; ++b)
                for (int l = 0; l < L; ++l) {
                    const float* gr = g + ((int64_t)b * L + l) * D;
                    float* dst = gt + (int64_t)(*idx)[l] * D;
                    for (int j = 0; j < D; ++j) dst[j] += gr[j];
                }
        }
    });
}

Var add_per_batch_vec(Tape& tp, Var x, Var v) {
    int B = x->val.shape[0], L = x->val.shape[1], D = x->val.shape[2];
    if (v->val.shape != std::vector<int>{B, D})
        throw std::invalid_argument("add_per_batch_vec: shape mismatch");
    Tensor y = x->val;
    float* yp = y.ptr();
    const float* vp = v->val.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t bl = 0; bl < (int64_t)B * L; ++bl) {
        const float* row = vp + (bl / L) * D;
        float* dst = yp + bl * D;
        for (int j = 0; j < D; ++j) dst[j] += row[j];
    }
    return tp.make(std::move(y), {x, v}, [x, v, B, L, D](Node& n) {
        const float* g = n.grad.ptr();
        if (wants(x)) accum(x->ensure_grad(), n.grad);
        if (wants(v)) {
            float* gv = v->ensure_grad().ptr();
            for (int b = 0; b < B; ++b)
                for (int l = 0; l < L; ++l) {
                    const float* gr = g + ((int64_t)b * L + l) * D;
                    for (int j = 0; j < D; ++j) gv[(int64_t)b * D + j] += gr[j];
                }
        }
    });
}

Var expand_token(Tape& tp, Var v, int batch, int len) {
    int D = v->val.dim(-1);
    Tensor y({batch, len, D});
    float* yp = y.ptr();
    const float* vp = v->val.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < (int64_t)batch * len; ++i)
        std::memcpy(yp + i * D, vp, sizeof(float) * D);
    return tp.make(std::move(y), {v}, [v, batch, len, D](Node& n) {
        if (!wants(v)) return;
        float* gv = v->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int64_t i = 0; i < (int64_t)batch * len; ++i)
            for (int j = 0; j < D; ++j) gv[j] += g[i * D + j];
    });
}

// ---- normalization / activations --------------------------------------

Var layer_norm(Tape& tp, Var x, Var gamma, Var beta) {
    int D = x->val.dim(-1);
    int64_t rows = rows_of(x->val, D);
    Tensor y(x->val.shape);
    k::layer_norm(x->val.ptr(), gamma->val.ptr(), beta->val.ptr(), y.ptr(), rows, D, 1e-5f);
    return tp.make(std::move(y), {x, gamma, beta}, [x, gamma, beta, rows, D](Node& n) {
        const float* g = n.grad.ptr();
        const float* xp = x->val.ptr();
        const float* gm = gamma->val.ptr();
        float* gx = wants(x) ? x->ensure_grad().ptr() : nullptr;
        // gamma/beta grads must be reduced in a fixed order; keep them serial
        float* gg = wants(gamma) ? gamma->ensure_grad().ptr() : nullptr;
        float* gb = wants(beta) ? beta->ensure_grad().ptr() : nullptr;
        std::vector<float> ggl, gbl;
        if (gg) ggl.assign(D, 0.0f);
        if (gb) gbl.assign(D, 0.0f);
        for (int64_t r = 0; r < rows; ++r) {
            const float* xr = xp + r * D;
            const float* gr = g + r * D;
            float mean = 0.0f;
            for (int j = 0; j < D; ++j) mean += xr[j];
            mean /= D;
            float var = 0.0f;
            for (int j = 0; j < D; ++j) {
                float d = xr[j] - mean;
                var += d * d;
            }
            var /= D;
            float rstd = 1.0f / std::sqrt(var + 1e-5f);
            float sum_gy = 0.0f, sum_gyx = 0.0f;
            for (int j = 0; j < D; ++j) {
                float xhat = (xr[j] - mean) * rstd;
                float gyg = gr[j] * gm[j];
                sum_gy += gyg;
                sum_gyx += gyg * xhat;
                if (gg) ggl[j] += gr[j] * xhat;
                if (gb) gbl[j] += gr[j];
            }
            if (gx) {
                float* gxr = gx + r * D;
                for (int j = 0; j < D; ++j) {
                    float xhat = (xr[j] - mean) * rstd;
                    float gyg = gr[j] * gm[j];
                    gxr[j] += rstd * (gyg - (sum_gy + xhat * sum_gyx) / D);
                }
            }
        }
        if (gg)
            for (int j = 0; j < D; ++j) gg[j] += ggl[j];
        if (gb)
            for (int j = 0; j < D; ++j) gb[j] += gbl[j];
    });
}

Var gelu(Tape& tp, Var x) {
    Tensor y(x->val.shape);
    k::gelu(x->val.ptr(), y.ptr(), x->val.numel());
    return tp.make(std::move(y), {x}, [x](Node& n) {
        if (!wants(x)) return;
        const float* xp = x->val.ptr();
        const float* g = n.grad.ptr();
        float* gx = x->ensure_grad().ptr();
        int64_t cnt = n.grad.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < cnt; ++i) {
            const float c = 0.7978845608028654f;
            float v = xp[i];
            float u = c * (v + 0.044715f * v * v * v);
            float t = std::tanh(u);
            float du = c * (1.0f + 3.0f * 0.044715f * v * v);
            float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
            gx[i] += g[i] * d;
        }
    });
}

Var sigmoid(Tape& tp, Var x) {
    Tensor y(x->val.shape);
    const float* xp = x->val.ptr();
    float* yp = y.ptr();
    int64_t cnt = y.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < cnt; ++i) yp[i] = 1.0f / (1.0f + std::exp(-xp[i]));
    return tp.make(std::move(y), {x}, [x](Node& n) {
        if (!wants(x)) return;
        const float* yp = n.val.ptr();
        const float* g = n.grad.ptr();
        float* gx = x->ensure_grad().ptr();
        int64_t cnt = n.grad.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < cnt; ++i) gx[i] += g[i] * yp[i] * (1.0f - yp[i]);
    });
}

// ---- token layout ------------------------------------------------------

Var concat_tokens(Tape& tp, const std::vector<Var>& xs) {
    int B = xs[0]->val.shape[0], D = xs[0]->val.shape[2];
    int L = 0;
    for (const auto& x : xs) {
        if (x->val.shape[0] != B || x->val.shape[2] != D)
            throw std::invalid_argument("concat_tokens: incompatible shapes");
        L += x->val.shape[1];
    }
    Tensor y({B, L, D});
    float* yp = y.ptr();
    int off = 0;
    for (const auto& x : xs) {
        int li = x->val.shape[1];
        const float* xp = x->val.ptr();
        for (int b = 0; b < B; ++b)
            std::memcpy(yp + ((int64_t)b * L + off) * D, xp + (int64_t)b * li * D,
                        sizeof(float) * li * D);
        off += li;
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return tp.make(std::move(y), parents, [xs, B, L, D](Node& n) {
        const float* g = n.grad.ptr();
        int off = 0;
        for (const auto& x : xs) {
            int li = x->val.shape[1];
            if (wants(x)) {
                float* gx = x->ensure_grad().ptr();
                for (int b = 0; b < B; ++b) {
                    const float* src = g + ((int64_t)b * L + off) * D;
                    float* dst = gx + (int64_t)b * li * D;
                    for (int64_t i = 0; i < (int64_t)li * D; ++i) dst[i] += src[i];
                }
            }
            off += li;
        }
    });
}

Var slice_tokens(Tape& tp, Var x, int off, int len) {
    int B = x->val.shape[0], L = x->val.shape[1], D = x->val.shape[2];
    if (off < 0 || off + len > L) throw std::invalid_argument("slice_tokens: out of range");
    Tensor y({B, len, D});
    float* yp = y.ptr();
    const float* xp = x->val.ptr();
    for (int b = 0; b < B; ++b)
        std::memcpy(yp + (int64_t)b * len * D, xp + ((int64_t)b * L + off) * D,
                    sizeof(float) * len * D);
    return tp.make(std::move(y), {x}, [x, off, len, B, L, D](Node& n) {
        if (!wants(x)) return;
        float* gx = x->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int b = 0; b < B; ++b) {
            const float* src = g + (int64_t)b * len * D;
            float* dst = gx + ((int64_t)b * L + off) * D;
            for (int64_t i = 0; i < (int64_t)len * D; ++i) dst[i] += src[i];
        }
    });
}

Var reshape(Tape& tp, Var x, std::vector<int> s) {
    Tensor y = x->val.reshaped(s);
    return tp.make(std::move(y), {x}, [x](Node& n) {
        if (!wants(x)) return;
        float* gx = x->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i];
    });
}

// ---- attention ---------------------------------------------------------

namespace {

// shared by self/cross attention backward
struct AttnCtx {
    Tensor q, kv_or_k;  // self: qkv (B,L,3D); cross: q (B,Lq,D) and kv (B,Lk,2D)
    Tensor probs;       // (B, h, Lq, Lk)
    Tensor merged;      // (B, Lq, D) pre-output-projection
};

}  // namespace

Var self_attention(Tape& tp, Var x, Var wqkv, Var bqkv, Var wo, Var bo, int heads) {
    int B = x->val.shape[0], L = x->val.shape[1], D = x->val.shape[2];
    if (wqkv->val.shape[0] != D || wqkv->val.shape[1] != 3 * D)
        throw std::invalid_argument("self_attention: wqkv must be (D, 3D)");
    int dh = D / heads;
    auto ctx = std::make_shared<AttnCtx>();

    // qkv projection
    ctx->q = Tensor({B, L, 3 * D});
    k::gemm(false, false, B * L, 3 * D, D, x->val.ptr(), wqkv->val.ptr(), ctx->q.ptr(), 0.0f);
    {
        float* p = ctx->q.ptr();
        const float* bp = bqkv->val.ptr();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < (int64_t)B * L; ++r)
            for (int j = 0; j < 3 * D; ++j) p[r * 3 * D + j] += bp[j];
    }

    ctx->probs = Tensor({B, heads, L, L});
    ctx->merged = Tensor({B, L, D});
    // per (batch, head): contiguous copies, then two gemms
#pragma omp parallel for schedule(static)
    for (int bh = 0; bh < B * heads; ++bh) {
        int b = bh / heads, h = bh % heads;
        std::vector<float> qh((size_t)L * dh), kh((size_t)L * dh), vh((size_t)L * dh),
            oh((size_t)L * dh);
        const float* qkv = ctx->q.ptr() + (int64_t)b * L * 3 * D;
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < dh; ++j) {
                qh[(size_t)l * dh + j] = qkv[(int64_t)l * 3 * D + h * dh + j];
                kh[(size_t)l * dh + j] = qkv[(int64_t)l * 3 * D + D + h * dh + j];
                vh[(size_t)l * dh + j] = qkv[(int64_t)l * 3 * D + 2 * D + h * dh + j];
            }
        float* probs = ctx->probs.ptr() + (int64_t)bh * L * L;
        kernels::par::attention_head(qh.data(), kh.data(), vh.data(), probs, oh.data(), L, L, dh);
        float* merged = ctx->merged.ptr() + (int64_t)b * L * D;
        for (int l = 0; l < L; ++l)
            std::memcpy(merged + (int64_t)l * D + h * dh, oh.data() + (size_t)l * dh,
                        sizeof(float) * dh);
    }

    Tensor y({B, L, D});
    k::gemm(false, false, B * L, D, D, ctx->merged.ptr(), wo->val.ptr(), y.ptr(), 0.0f);
    {
        float* p = y.ptr();
        const float* bp = bo->val.ptr();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < (int64_t)B * L; ++r)
            for (int j = 0; j < D; ++j) p[r * D + j] += bp[j];
    }

    return tp.make(std::move(y), {x, wqkv, bqkv, wo, bo},
                   [x, wqkv, bqkv, wo, bo, heads, ctx, B, L, D, dh](Node& n) {
        const float* gy = n.grad.ptr();
        // output projection
        Tensor gmerged({B, L, D});
        k::gemm(false, true, B * L, D, D, gy, wo->val.ptr(), gmerged.ptr(), 0.0f);
        if (wants(wo))
            k::gemm(true, false, D, D, B * L, ctx->merged.ptr(), gy,
                    wo->ensure_grad().ptr(), 1.0f);
        if (wants(bo)) {
            float* gb = bo->ensure_grad().ptr();
            for (int64_t r = 0; r < (int64_t)B * L; ++r)
                for (int j = 0; j < D; ++j) gb[j] += gy[r * D + j];
        }
        Tensor gqkv({B, L, 3 * D});
#pragma omp parallel for schedule(static)
        for (int bh = 0; bh < B * heads; ++bh) {
            int b = bh / heads, h = bh % heads;
            std::vector<float> qh((size_t)L * dh), kh((size_t)L * dh), vh((size_t)L * dh);
            const float* qkv = ctx->q.ptr() + (int64_t)b * L * 3 * D;
            for (int l = 0; l < L; ++l)
                for (int j = 0; j < dh; ++j) {
                    qh[(size_t)l * dh + j] = qkv[(int64_t)l * 3 * D + h * dh + j];
                    kh[(size_t)l * dh + j] = qkv[(int64_t)l * 3 * D + D + h * dh + j];
                    vh[(size_t)l * dh + j] = qkv[(int64_t)l * 3 * D + 2 * D + h * dh + j];
                }
            const float* probs = ctx->probs.ptr() + (int64_t)bh * L * L;
            // dO for this head
            std::vector<float> go((size_t)L * dh);
            const float* gm = gmerged.ptr() + (int64_t)b * L * D;
            for (int l = 0; l < L; ++l)
                std::memcpy(go.data() + (size_t)l * dh, gm + (int64_t)l * D + h * dh,
                            sizeof(float) * dh);
            std::vector<float> gv((size_t)L * dh), gp((size_t)L * L), gs((size_t)L * L),
                gq((size_t)L * dh), gk((size_t)L * dh);
            k::gemm(true, false, L, dh, L, probs, go.data(), gv.data(), 0.0f);
            k::gemm(false, true, L, L, dh, go.data(), vh.data(), gp.data(), 0.0f);
            // softmax backward
            for (int i = 0; i < L; ++i) {
                const float* pr = probs + (int64_t)i * L;
                const float* gpr = gp.data() + (size_t)i * L;
                float dot = 0.0f;
                for (int j = 0; j < L; ++j) dot += pr[j] * gpr[j];
                float* gsr = gs.data() + (size_t)i * L;
                for (int j = 0; j < L; ++j) gsr[j] = pr[j] * (gpr[j] - dot);
            }
            float sc = 1.0f / std::sqrt((float)dh);
            for (auto& v : gs) v *= sc;
            k::gemm(false, false, L, dh, L, gs.data(), kh.data(), gq.data(), 0.0f);
            k::gemm(true, false, L, dh, L, gs.data(), qh.data(), gk.data(), 0.0f);
            float* gqkv_b = gqkv.ptr() + (int64_t)b * L * 3 * D;
            for (int l = 0; l < L; ++l)
                for (int j = 0; j < dh; ++j) {
                    gqkv_b[(int64_t)l * 3 * D + h * dh + j] = gq[(size_t)l * dh + j];
                    gqkv_b[(int64_t)l * 3 * D + D + h * dh + j] = gk[(size_t)l * dh + j];
                    gqkv_b[(int64_t)l * 3 * D + 2 * D + h * dh + j] = gv[(size_t)l * dh + j];
                }
        }
        if (wants(x))
            k::gemm(false, true, B * L, D, 3 * D, gqkv.ptr(), wqkv->val.ptr(),
                    x->ensure_grad().ptr(), 1.0f);
        if (wants(wqkv))
            k::gemm(true, false, D, 3 * D, B * L, x->val.ptr(), gqkv.ptr(),
                    wqkv->ensure_grad().ptr(), 1.0f);
        if (wants(bqkv)) {
            float* gb = bqkv->ensure_grad().ptr();
            const float* g = gqkv.ptr();
            for (int64_t r = 0; r < (int64_t)B * L; ++r)
                for (int j = 0; j < 3 * D; ++j) gb[j] += g[r * 3 * D + j];
        }
    });
}

Var cross_attention(Tape& tp, Var q_in, Var kv_in, Var wq, Var bq, Var wkv, Var bkv,
                    Var wo, Var bo, int heads) {
    int B = q_in->val.shape[0], Lq = q_in->val.shape[1], D = q_in->val.shape[2];
    int Lk = kv_in->val.shape[1];
    if (kv_in->val.shape[0] != B || kv_in->val.shape[2] != D)
        throw std::invalid_argument("cross_attention: batch/width mismatch");
    int dh = D / heads;
    auto ctx = std::make_shared<AttnCtx>();

    ctx->q = Tensor({B, Lq, D});
    k::gemm(false, false, B * Lq, D, D, q_in->val.ptr(), wq->val.ptr(), ctx->q.ptr(), 0.0f);
    ctx->kv_or_k = Tensor({B, Lk, 2 * D});
    k::gemm(false, false, B * Lk, 2 * D, D, kv_in->val.ptr(), wkv->val.ptr(),
            ctx->kv_or_k.ptr(), 0.0f);
    {
        float* p = ctx->q.ptr();
        const float* bp = bq->val.ptr();
        for (int64_t r = 0; r < (int64_t)B * Lq; ++r)
            for (int j = 0; j < D; ++j) p[r * D + j] += bp[j];
        float* pk = ctx->kv_or_k.ptr();
        const float* bkp = bkv->val.ptr();
        for (int64_t r = 0; r < (int64_t)B * Lk; ++r)
            for (int j = 0; j < 2 * D; ++j) pk[r * 2 * D + j] += bkp[j];
    }

    ctx->probs = Tensor({B, heads, Lq, Lk});
    ctx->merged = Tensor({B, Lq, D});
#pragma omp parallel for schedule(static)
    for (int bh = 0; bh < B * heads; ++bh) {
        int b = bh / heads, h = bh % heads;
        std::vector<float> qh((size_t)Lq * dh), kh((size_t)Lk * dh), vh((size_t)Lk * dh),
            oh((size_t)Lq * dh);
        const float* qp = ctx->q.ptr() + (int64_t)b * Lq * D;
        const float* kvp = ctx->kv_or_k.ptr() + (int64_t)b * Lk * 2 * D;
        for (int l = 0; l < Lq; ++l)
            for (int j = 0; j < dh; ++j) qh[(size_t)l * dh + j] = qp[(int64_t)l * D + h * dh + j];
        for (int l = 0; l < Lk; ++l)
            for (int j = 0; j < dh; ++j) {
                kh[(size_t)l * dh + j] = kvp[(int64_t)l * 2 * D + h * dh + j];
                vh[(size_t)l * dh + j] = kvp[(int64_t)l * 2 * D + D + h * dh + j];
            }
        float* probs = ctx->probs.ptr() + (int64_t)bh * Lq * Lk;
        kernels::par::attention_head(qh.data(), kh.data(), vh.data(), probs, oh.data(), Lq, Lk, dh);
        float* merged = ctx->merged.ptr() + (int64_t)b * Lq * D;
        for (int l = 0; l < Lq; ++l)
            std::memcpy(merged + (int64_t)l * D + h * dh, oh.data() + (size_t)l * dh,
                        sizeof(float) * dh);
    }

    Tensor y({B, Lq, D});
    k::gemm(false, false, B * Lq, D, D, ctx->merged.ptr(), wo->val.ptr(), y.ptr(), 0.0f);
    {
        float* p = y.ptr();
        const float* bp = bo->val.ptr();
        for (int64_t r = 0; r < (int64_t)B * Lq; ++r)
            for (int j = 0; j < D; ++j) p[r * D + j] += bp[j];
    }

    return tp.make(std::move(y), {q_in, kv_in, wq, bq, wkv, bkv, wo, bo},
                   [q_in, kv_in, wq, bq, wkv, bkv, wo, bo, heads, ctx, B, Lq, Lk, D, dh](Node& n) {
        const float* gy = n.grad.ptr();
        Tensor gmerged({B, Lq, D});
        k::gemm(false, true, B * Lq, D, D, gy, wo->val.ptr(), gmerged.ptr(), 0.0f);
        if (wants(wo))
            k::gemm(true, false, D, D, B * Lq, ctx->merged.ptr(), gy,
                    wo->ensure_grad().ptr(), 1.0f);
        if (wants(bo)) {
            float* gb = bo->ensure_grad().ptr();
            for (int64_t r = 0; r < (int64_t)B * Lq; ++r)
                for (int j = 0; j < D; ++j) gb[j] += gy[r * D + j];
        }
        Tensor gq_full({B, Lq, D});
        Tensor gkv_full({B, Lk, 2 * D});
        std::memset(gq_full.ptr(), 0, sizeof(float) * gq_full.numel());
        std::memset(gkv_full.ptr(), 0, sizeof(float) * gkv_full.numel());
#pragma omp parallel for schedule(static)
        for (int bh = 0; bh < B * heads; ++bh) {
            int b = bh / heads, h = bh % heads;
            std::vector<float> qh((size_t)Lq * dh), kh((size_t)Lk * dh), vh((size_t)Lk * dh);
            const float* qp = ctx->q.ptr() + (int64_t)b * Lq * D;
            const float* kvp = ctx->kv_or_k.ptr() + (int64_t)b * Lk * 2 * D;
            for (int l = 0; l < Lq; ++l)
                for (int j = 0; j < dh; ++j)
                    qh[(size_t)l * dh + j] = qp[(int64_t)l * D + h * dh + j];
            for (int l = 0; l < Lk; ++l)
                for (int j = 0; j < dh; ++j) {
                    kh[(size_t)l * dh + j] = kvp[(int64_t)l * 2 * D + h * dh + j];
                    vh[(size_t)l * dh + j] = kvp[(int64_t)l * 2 * D + D + h * dh + j];
                }
            const float* probs = ctx->probs.ptr() + (int64_t)bh * Lq * Lk;
            std::vector<float> go((size_t)Lq * dh);
            const float* gm = gmerged.ptr() + (int64_t)b * Lq * D;
            for (int l = 0; l < Lq; ++l)
                std::memcpy(go.data() + (size_t)l * dh, gm + (int64_t)l * D + h * dh,
                            sizeof(float) * dh);
            std::vector<float> gv((size_t)Lk * dh), gp((size_t)Lq * Lk), gs((size_t)Lq * Lk),
                gqh((size_t)Lq * dh), gkh((size_t)Lk * dh);
            k::gemm(true, false, Lk, dh, Lq, probs, go.data(), gv.data(), 0.0f);
            k::gemm(false, true, Lq, Lk, dh, go.data(), vh.data(), gp.data(), 0.0f);
            for (int i = 0; i < Lq; ++i) {
                const float* pr = probs + (int64_t)i * Lk;
                const float* gpr = gp.data() + (size_t)i * Lk;
                float dot = 0.0f;
                for (int j = 0; j < Lk; ++j) dot += pr[j] * gpr[j];
                float* gsr = gs.data() + (size_t)i * Lk;
                for (int j = 0; j < Lk; ++j) gsr[j] = pr[j] * (gpr[j] - dot);
            }
            float sc = 1.0f / std::sqrt((float)dh);
            for (auto& v : gs) v *= sc;
            k::gemm(false, false, Lq, dh, Lk, gs.data(), kh.data(), gqh.data(), 0.0f);
            k::gemm(true, false, Lk, dh, Lq, gs.data(), qh.data(), gkh.data(), 0.0f);
            float* gqf = gq_full.ptr() + (int64_t)b * Lq * D;
            float* gkvf = gkv_full.ptr() + (int64_t)b * Lk * 2 * D;
            for (int l = 0; l < Lq; ++l)
                for (int j = 0; j < dh; ++j)
                    gqf[(int64_t)l * D + h * dh + j] = gqh[(size_t)l * dh + j];
            for (int l = 0; l < Lk; ++l)
                for (int j = 0; j < dh; ++j) {
                    gkvf[(int64_t)l * 2 * D + h * dh + j] = gkh[(size_t)l * dh + j];
                    gkvf[(int64_t)l * 2 * D + D + h * dh + j] = gv[(size_t)l * dh + j];
                }
        }
        if (wants(q_in))
            k::gemm(false, true, B * Lq, D, D, gq_full.ptr(), wq->val.ptr(),
                    q_in->ensure_grad().ptr(), 1.0f);
        if (wants(wq))
            k::gemm(true, false, D, D, B * Lq, q_in->val.ptr(), gq_full.ptr(),
                    wq->ensure_grad().ptr(), 1.0f);
        if (wants(bq)) {
            float* gb = bq->ensure_grad().ptr();
            const float* g = gq_full.ptr();
            for (int64_t r = 0; r < (int64_t)B * Lq; ++r)
                for (int j = 0; j < D; ++j) gb[j] += g[r * D + j];
        }
        if (wants(kv_in))
            k::gemm(false, true, B * Lk, D, 2 * D, gkv_full.ptr(), wkv->val.ptr(),
                    kv_in->ensure_grad().ptr(), 1.0f);
        if (wants(wkv))
            k::gemm(true, false, D, 2 * D, B * Lk, kv_in->val.ptr(), gkv_full.ptr(),
                    wkv->ensure_grad().ptr(), 1.0f);
        if (wants(bkv)) {
            float* gb = bkv->ensure_grad().ptr();
            const float* g = gkv_full.ptr();
            for (int64_t r = 0; r < (int64_t)B * Lk; ++r)
                for (int j = 0; j < 2 * D; ++j) gb[j] += g[r * 2 * D + j];
        }
    });
}

// ---- losses ------------------------------------------------------------

Var mse(Tape& tp, Var a, Var b) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument("mse: shape mismatch " + a->val.shape_str() + " vs " +
                                    b->val.shape_str());
    int64_t cnt = a->val.numel();
    double acc = 0.0;
    const float* ap = a->val.ptr();
    const float* bp = b->val.ptr();
    for (int64_t i = 0; i < cnt; ++i) {
        double d = (double)ap[i] - bp[i];
        acc += d * d;
    }
    Tensor y({1});
    y.data[0] = (float)(acc / cnt);
    return tp.make(std::move(y), {a, b}, [a, b, cnt](Node& n) {
        float g = n.grad.data[0] * 2.0f / (float)cnt;
        const float* ap = a->val.ptr();
        const float* bp = b->val.ptr();
        if (wants(a)) {
            float* ga = a->ensure_grad().ptr();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < cnt; ++i) ga[i] += g * (ap[i] - bp[i]);
        }
        if (wants(b)) {
            float* gb = b->ensure_grad().ptr();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < cnt; ++i) gb[i] -= g * (ap[i] - bp[i]);
        }
    });
}

// ---- quantizer support ---------------------------------------------------

Var gather_rows(Tape& tp, Var table, std::vector<int> idx) {
    int K = table->val.shape[0], D = table->val.shape[1];
    int N = (int)idx.size();
    Tensor y({N, D});
    float* yp = y.ptr();
    const float* t = table->val.ptr();
    for (int i = 0; i < N; ++i) {
        if (idx[i] < 0 || idx[i] >= K) throw std::out_of_range("gather_rows: bad index");
        std::memcpy(yp + (int64_t)i * D, t + (int64_t)idx[i] * D, sizeof(float) * D);
    }
    auto ip = std::make_shared<std::vector<int>>(std::move(idx));
    return tp.make(std::move(y), {table}, [table, ip, N, D](Node& n) {
        if (!wants(table)) return;
        float* gt = table->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int i = 0; i < N; ++i) {
            float* dst = gt + (int64_t)(*ip)[i] * D;
            const float* src = g + (int64_t)i * D;
            for (int j = 0; j < D; ++j) dst[j] += src[j];
        }
    });
}

Var detach(Tape& tp, Var x) {
    Tensor y = x->val;
    return tp.make(std::move(y), {}, nullptr);
}

Var straight_through(Tape& tp, Var z, Tensor quantized) {
    if (z->val.shape != quantized.shape)
        throw std::invalid_argument("straight_through: shape mismatch");
    return tp.make(std::move(quantized), {z}, [z](Node& n) {
        if (wants(z)) accum(z->ensure_grad(), n.grad);
    });
}

// ---- convolutions --------------------------------------------------------

Var conv2d(Tape& tp, Var x, Var kern, Var b, int stride, int pad) {
    int B = x->val.shape[0], Ci = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    int Co = kern->val.shape[0], kh = kern->val.shape[2], kw = kern->val.shape[3];
    if (kern->val.shape[1] != Ci) throw std::invalid_argument("conv2d: channel mismatch");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor y({B, Co, Ho, Wo});
    float* yp = y.ptr();
    const float* xp = x->val.ptr();
    const float* kp = kern->val.ptr();
    const float* bp = b ? b->val.ptr() : nullptr;
#pragma omp parallel for schedule(static)
    for (int bc = 0; bc < B * Co; ++bc) {
        int bi = bc / Co, co = bc % Co;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                float acc = bp ? bp[co] : 0.0f;
                for (int ci = 0; ci < Ci; ++ci)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            int ii = i * stride - pad + u;
                            int jj = j * stride - pad + v;
                            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                            acc += xp[(((int64_t)bi * Ci + ci) * H + ii) * W + jj] *
                                   kp[(((int64_t)co * Ci + ci) * kh + u) * kw + v];
                        }
                yp[(((int64_t)bi * Co + co) * Ho + i) * Wo + j] = acc;
            }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, kern, b} : std::vector<Var>{x, kern};
    return tp.make(std::move(y), parents,
                   [x, kern, b, stride, pad, B, Ci, H, W, Co, kh, kw, Ho, Wo](Node& n) {
        const float* g = n.grad.ptr();
        const float* xp = x->val.ptr();
        const float* kp = kern->val.ptr();
        if (wants(x)) {
            float* gx = x->ensure_grad().ptr();
#pragma omp parallel for schedule(static)
            for (int bc = 0; bc < B * Ci; ++bc) {
                int bi = bc / Ci, ci = bc % Ci;
                for (int ii = 0; ii < H; ++ii)
                    for (int jj = 0; jj < W; ++jj) {
                        float acc = 0.0f;
                        for (int co = 0; co < Co; ++co)
                            for (int u = 0; u < kh; ++u)
                                for (int v = 0; v < kw; ++v) {
                                    int num_i = ii + pad - u;
                                    int num_j = jj + pad - v;
                                    if (num_i % stride || num_j % stride) continue;
                                    int i = num_i / stride, j = num_j / stride;
                                    if (i < 0 || i >= Ho || j < 0 || j >= Wo) continue;
                                    acc += g[(((int64_t)bi * Co + co) * Ho + i) * Wo + j] *
                                           kp[(((int64_t)co * Ci + ci) * kh + u) * kw + v];
                                }
                        gx[(((int64_t)bi * Ci + ci) * H + ii) * W + jj] += acc;
                    }
            }
        }
        if (wants(kern)) {
            float* gk = kern->ensure_grad().ptr();
            for (int co = 0; co < Co; ++co)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            float acc = 0.0f;
                            for (int bi = 0; bi < B; ++bi)
                                for (int i = 0; i < Ho; ++i)
                                    for (int j = 0; j < Wo; ++j) {
                                        int ii = i * stride - pad + u;
                                        int jj = j * stride - pad + v;
                                        if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                        acc += g[(((int64_t)bi * Co + co) * Ho + i) * Wo + j] *
                                               xp[(((int64_t)bi * Ci + ci) * H + ii) * W + jj];
                                    }
                            gk[(((int64_t)co * Ci + ci) * kh + u) * kw + v] += acc;
                        }
        }
        if (b && wants(b)) {
            float* gb = b->ensure_grad().ptr();
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < Co; ++co)
                    for (int64_t i = 0; i < (int64_t)Ho * Wo; ++i)
                        gb[co] += g[((int64_t)bi * Co + co) * Ho * Wo + i];
        }
    });
}

Var conv_transpose2d(Tape& tp, Var x, Var kern, Var b, int stride, int pad) {
    int B = x->val.shape[0], Ci = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    int Co = kern->val.shape[1], kh = kern->val.shape[2], kw = kern->val.shape[3];
    if (kern->val.shape[0] != Ci) throw std::invalid_argument("conv_transpose2d: channel mismatch");
    int Ho = (H - 1) * stride - 2 * pad + kh;
    int Wo = (W - 1) * stride - 2 * pad + kw;
    Tensor y({B, Co, Ho, Wo});
    float* yp = y.ptr();
    const float* xp = x->val.ptr();
    const float* kp = kern->val.ptr();
    const float* bp = b ? b->val.ptr() : nullptr;
#pragma omp parallel for schedule(static)
    for (int bc = 0; bc < B * Co; ++bc) {
        int bi = bc / Co, co = bc % Co;
        for (int oi = 0; oi < Ho; ++oi)
            for (int oj = 0; oj < Wo; ++oj) {
                float acc = bp ? bp[co] : 0.0f;
                for (int ci = 0; ci < Ci; ++ci)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            int num_i = oi + pad - u;
                            int num_j = oj + pad - v;
                            if (num_i % stride || num_j % stride) continue;
                            int i = num_i / stride, j = num_j / stride;
                            if (i < 0 || i >= H || j < 0 || j >= W) continue;
                            acc += xp[(((int64_t)bi * Ci + ci) * H + i) * W + j] *
                                   kp[(((int64_t)ci * Co + co) * kh + u) * kw + v];
                        }
                yp[(((int64_t)bi * Co + co) * Ho + oi) * Wo + oj] = acc;
            }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, kern, b} : std::vector<Var>{x, kern};
    return tp.make(std::move(y), parents,
                   [x, kern, b, stride, pad, B, Ci, H, W, Co, kh, kw, Ho, Wo](Node& n) {
        const float* g = n.grad.ptr();
        const float* xp = x->val.ptr();
        const float* kp = kern->val.ptr();
        if (wants(x)) {
            float* gx = x->ensure_grad().ptr();
#pragma omp parallel for schedule(static)
            for (int bc = 0; bc < B * Ci; ++bc) {
                int bi = bc / Ci, ci = bc % Ci;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        float acc = 0.0f;
                        for (int co = 0; co < Co; ++co)
                            for (int u = 0; u < kh; ++u)
                                for (int v = 0; v < kw; ++v) {
                                    int oi = i * stride - pad + u;
                                    int oj = j * stride - pad + v;
                                    if (oi < 0 || oi >= Ho || oj < 0 || oj >= Wo) continue;
                                    acc += g[(((int64_t)bi * Co + co) * Ho + oi) * Wo + oj] *
                                           kp[(((int64_t)ci * Co + co) * kh + u) * kw + v];
                                }
                        gx[(((int64_t)bi * Ci + ci) * H + i) * W + j] += acc;
                    }
            }
        }
        if (wants(kern)) {
            float* gk = kern->ensure_grad().ptr();
            for (int ci = 0; ci < Ci; ++ci)
                for (int co = 0; co < Co; ++co)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            float acc = 0.0f;
                            for (int bi = 0; bi < B; ++bi)
                                for (int i = 0; i < H; ++i)
                                    for (int j = 0; j < W; ++j) {
                                        int oi = i * stride - pad + u;
                                        int oj = j * stride - pad + v;
                                        if (oi < 0 || oi >= Ho || oj < 0 || oj >= Wo) continue;
                                        acc += xp[(((int64_t)bi * Ci + ci) * H + i) * W + j] *
                                               g[(((int64_t)bi * Co + co) * Ho + oi) * Wo + oj];
                                    }
                            gk[(((int64_t)ci * Co + co) * kh + u) * kw + v] += acc;
                        }
        }
        if (b && wants(b)) {
            float* gb = b->ensure_grad().ptr();
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < Co; ++co)
                    for (int64_t i = 0; i < (int64_t)Ho * Wo; ++i)
                        gb[co] += g[((int64_t)bi * Co + co) * Ho * Wo + i];
        }
    });
}

// ---- token resampling ------------------------------------------------------

Var token_resample(Tape& tp, Var x, Var a) {
    int B = x->val.shape[0], P = x->val.shape[1], D = x->val.shape[2];
    int Q = a->val.shape[0];
    if (a->val.shape[1] != P) throw std::invalid_argument("token_resample: dim mismatch");
    Tensor y({B, Q, D});
    for (int b = 0; b < B; ++b)
        k::gemm(false, false, Q, D, P, a->val.ptr(), x->val.ptr() + (int64_t)b * P * D,
                y.ptr() + (int64_t)b * Q * D, 0.0f);
    return tp.make(std::move(y), {x, a}, [x, a, B, P, D, Q](Node& n) {
        const float* g = n.grad.ptr();
        if (wants(x)) {
            float* gx = x->ensure_grad().ptr();
            for (int b = 0; b < B; ++b)
                k::gemm(true, false, P, D, Q, a->val.ptr(), g + (int64_t)b * Q * D,
                        gx + (int64_t)b * P * D, 1.0f);
        }
        if (wants(a)) {
            float* ga = a->ensure_grad().ptr();
            for (int b = 0; b < B; ++b)
                k::gemm(false, true, Q, P, D, g + (int64_t)b * Q * D,
                        x->val.ptr() + (int64_t)b * P * D, ga, 1.0f);
        }
    });
}

// ---- patch layout ------------------------------------------------------------

Var patchify(Tape& tp, Var img, int p) {
    int B = img->val.shape[0], H = img->val.shape[1], W = img->val.shape[2],
        C = img->val.shape[3];
    if (H % p || W % p)
        throw std::invalid_argument("patchify: patch size must divide image dims");
    int gh = H / p, gw = W / p, L = gh * gw, D = p * p * C;
    Tensor y({B, L, D});
    float* yp = y.ptr();
    const float* xp = img->val.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t bl = 0; bl < (int64_t)B * L; ++bl) {
        int b = (int)(bl / L), l = (int)(bl % L);
        int gy = l / gw, gx = l % gw;
        float* dst = yp + bl * D;
        for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
                for (int c = 0; c < C; ++c)
                    dst[(py * p + px) * C + c] =
                        xp[(((int64_t)b * H + gy * p + py) * W + gx * p + px) * C + c];
    }
    return tp.make(std::move(y), {img}, [img, p, B, H, W, C, gh, gw, L, D](Node& n) {
        if (!wants(img)) return;
        float* gx = img->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int64_t bl = 0; bl < (int64_t)B * L; ++bl) {
            int b = (int)(bl / L), l = (int)(bl % L);
            int gy = l / gw, gxi = l % gw;
            const float* src = g + bl * D;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < C; ++c)
                        gx[(((int64_t)b * H + gy * p + py) * W + gxi * p + px) * C + c] +=
                            src[(py * p + px) * C + c];
        }
    });
}

Var unpatchify(Tape& tp, Var tok, int p, int h, int w, int c) {
    int B = tok->val.shape[0], L = tok->val.shape[1], D = tok->val.shape[2];
    int gh = h / p, gw = w / p;
    if (L != gh * gw || D != p * p * c)
        throw std::invalid_argument("unpatchify: token layout mismatch");
    Tensor y({B, h, w, c});
    float* yp = y.ptr();
    const float* xp = tok->val.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t bl = 0; bl < (int64_t)B * L; ++bl) {
        int b = (int)(bl / L), l = (int)(bl % L);
        int gy = l / gw, gx = l % gw;
        const float* src = xp + bl * D;
        for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
                for (int ci = 0; ci < c; ++ci)
                    yp[(((int64_t)b * h + gy * p + py) * w + gx * p + px) * c + ci] =
                        src[(py * p + px) * c + ci];
    }
    return tp.make(std::move(y), {tok}, [tok, p, h, w, c, B, L, D, gh, gw](Node& n) {
        if (!wants(tok)) return;
        float* gt = tok->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int64_t bl = 0; bl < (int64_t)B * L; ++bl) {
            int b = (int)(bl / L), l = (int)(bl % L);
            int gy = l / gw, gx = l % gw;
            float* dst = gt + bl * D;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int ci = 0; ci < c; ++ci)
                        dst[(py * p + px) * c + ci] +=
                            g[(((int64_t)b * h + gy * p + py) * w + gx * p + px) * c + ci];
        }
    });
}

Var nearest_upsample_2x(Tape& tp, Var x) {
    int nd = x->val.ndim();
    if (nd < 3) throw std::invalid_argument("nearest_upsample_2x: need (..., H, W, C)");
    int C = x->val.shape[nd - 1], W = x->val.shape[nd - 2], H = x->val.shape[nd - 3];
    int64_t N = x->val.numel() / ((int64_t)H * W * C);
    std::vector<int> out_shape = x->val.shape;
    out_shape[nd - 3] = 2 * H;
    out_shape[nd - 2] = 2 * W;
    Tensor y(out_shape);
    float* yp = y.ptr();
    const float* xp = x->val.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t n_ = 0; n_ < N; ++n_)
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j) {
                const float* src = xp + (((int64_t)n_ * H + i / 2) * W + j / 2) * C;
                float* dst = yp + (((int64_t)n_ * 2 * H + i) * 2 * W + j) * C;
                std::memcpy(dst, src, sizeof(float) * C);
            }
    return tp.make(std::move(y), {x}, [x, N, H, W, C](Node& n) {
        if (!wants(x)) return;
        float* gx = x->ensure_grad().ptr();
        const float* g = n.grad.ptr();
        for (int64_t n_ = 0; n_ < N; ++n_)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j) {
                    const float* src = g + (((int64_t)n_ * 2 * H + i) * 2 * W + j) * C;
                    float* dst = gx + (((int64_t)n_ * H + i / 2) * W + j / 2) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
    });
}

// ---- parameter store -----------------------------------------------------------

Var ParamStore::add(const std::string& name, Tensor init) {
    if (by_name.count(name)) throw std::invalid_argument("duplicate param: " + name);
    Var v = make_param(name, std::move(init));
    list.push_back(v);
    by_name[name] = v;
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::out_of_range("no such param: " + name);
    return it->second;
}

void ParamStore::zero_grads() {
    for (auto& p : list)
        if (p->has_grad()) std::memset(p->grad.ptr(), 0, sizeof(float) * p->grad.numel());
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& p : list) n += p->val.numel();
    return n;
}

void zero_init_rows(Var w, const std::vector<int>& rows) {
    int din = w->val.shape[0], dout = w->val.shape[1];
    for (int r : rows) {
        if (r < 0 || r >= din) throw std::out_of_range("zero_init_rows: row out of range");
        std::memset(w->val.ptr() + (int64_t)r * dout, 0, sizeof(float) * dout);
    }
}

void zero_fill(Var v) {
    std::memset(v->val.ptr(), 0, sizeof(float) * v->val.numel());
}

}  // namespace imanim
