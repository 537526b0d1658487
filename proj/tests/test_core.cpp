#include "doctest.h"
#include "gradcheck.hpp"
#include "imanim/core/kernels.hpp"
#include "imanim/core/rng.hpp"
#include "imanim/core/tensor.hpp"
#include "imanim/nn/layers.hpp"
#include "imanim/nn/optim.hpp"

#include <omp.h>

#include <cmath>
#include <vector>

using namespace imanim;
using imanim::testing::gradcheck;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = (float)rng.uniform(lo, hi);
    return t;
}

Var rand_param(ParamStore& ps, const std::string& name, std::vector<int> shape, Rng& rng) {
    return ps.add(name, rand_tensor(std::move(shape), rng));
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.dim(-1) == 3);
    for (float v : t.data) CHECK(v == 0.0f);
    t.at(1, 2) = 5.0f;
    CHECK(t.data[5] == 5.0f);
    Tensor r = t.reshaped({3, 2});
    CHECK(r.at(2, 1) == 5.0f);
    CHECK_THROWS(t.reshaped({4, 2}));
    Tensor f({2, 2}, 3.5f);
    CHECK(f.at(1, 1) == 3.5f);
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    Rng c(Rng::derive(42, 1)), d(Rng::derive(42, 2));
    bool differ = false;
    for (int i = 0; i < 10; ++i)
        if (c.uniform() != d.uniform()) differ = true;
    CHECK(differ);
    // state round trip
    Rng e(7);
    for (int i = 0; i < 13; ++i) e.normal();
    std::string s = e.state();
    double next = e.normal();
    Rng f(999);
    f.set_state(s);
    CHECK(f.normal() == next);
}

TEST_CASE("gemm par matches serial reference") {
    Rng rng(1);
    for (bool ta : {false, true})
        for (bool tb : {false, true})
            for (float beta : {0.0f, 1.0f}) {
                int m = 7, n = 5, k = 9;
                Tensor a = rand_tensor(ta ? std::vector<int>{k, m} : std::vector<int>{m, k}, rng);
                Tensor b = rand_tensor(tb ? std::vector<int>{n, k} : std::vector<int>{k, n}, rng);
                Tensor c1 = rand_tensor({m, n}, rng);
                Tensor c2 = c1;
                kernels::ref::gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c1.ptr(), beta);
                kernels::par::gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c2.ptr(), beta);
                for (int64_t i = 0; i < c1.numel(); ++i)
                    CHECK(std::fabs(c1.data[i] - c2.data[i]) < 5e-5);
            }
}

TEST_CASE("elementwise kernels par matches serial reference") {
    Rng rng(2);
    int rows = 17, cols = 13;
    Tensor x = rand_tensor({rows, cols}, rng, -4.0f, 4.0f);
    SUBCASE("softmax") {
        Tensor a = x, b = x;
        kernels::ref::softmax_rows(a.ptr(), rows, cols);
        kernels::par::softmax_rows(b.ptr(), rows, cols);
        for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::fabs(a.data[i] - b.data[i]) < 1e-6);
        for (int r = 0; r < rows; ++r) {
            float s = 0.0f;
            for (int c = 0; c < cols; ++c) s += a.at(r, c);
            CHECK(std::fabs(s - 1.0f) < 1e-5);
        }
    }
    SUBCASE("layer_norm") {
        Tensor g = rand_tensor({cols}, rng), be = rand_tensor({cols}, rng);
        Tensor y1({rows, cols}), y2({rows, cols});
        kernels::ref::layer_norm(x.ptr(), g.ptr(), be.ptr(), y1.ptr(), rows, cols, 1e-5f);
        kernels::par::layer_norm(x.ptr(), g.ptr(), be.ptr(), y2.ptr(), rows, cols, 1e-5f);
        for (int64_t i = 0; i < y1.numel(); ++i) CHECK(std::fabs(y1.data[i] - y2.data[i]) < 1e-5);
    }
    SUBCASE("gelu") {
        Tensor y1({rows, cols}), y2({rows, cols});
        kernels::ref::gelu(x.ptr(), y1.ptr(), x.numel());
        kernels::par::gelu(x.ptr(), y2.ptr(), x.numel());
        for (int64_t i = 0; i < y1.numel(); ++i) CHECK(std::fabs(y1.data[i] - y2.data[i]) < 1e-6);
        // spot values: gelu(0)=0, gelu(large)~large, gelu(-large)~0
        Tensor z({3});
        z.data = {0.0f, 6.0f, -6.0f};
        Tensor out({3});
        kernels::par::gelu(z.ptr(), out.ptr(), 3);
        CHECK(out.data[0] == 0.0f);
        CHECK(out.data[1] == doctest::Approx(6.0f).epsilon(1e-4));
        CHECK(std::fabs(out.data[2]) < 1e-4f);
    }
    SUBCASE("attention_head") {
        int l = 6, d = 4;
        Tensor q = rand_tensor({l, d}, rng), k = rand_tensor({l, d}, rng),
               v = rand_tensor({l, d}, rng);
        Tensor p1({l, l}), p2({l, l}), o1({l, d}), o2({l, d});
        kernels::ref::attention_head(q.ptr(), k.ptr(), v.ptr(), p1.ptr(), o1.ptr(), l, l, d);
        kernels::par::attention_head(q.ptr(), k.ptr(), v.ptr(), p2.ptr(), o2.ptr(), l, l, d);
        for (int64_t i = 0; i < o1.numel(); ++i) CHECK(std::fabs(o1.data[i] - o2.data[i]) < 1e-5);
        for (int64_t i = 0; i < p1.numel(); ++i) CHECK(std::fabs(p1.data[i] - p2.data[i]) < 1e-5);
    }
}

TEST_CASE("parallel kernels are invariant to thread count") {
    Rng rng(3);
    int m = 33, n = 29, k = 31;
    Tensor a = rand_tensor({m, k}, rng), b = rand_tensor({k, n}, rng);
    Tensor c1({m, n}), c2({m, n});
    int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    kernels::par::gemm(false, false, m, n, k, a.ptr(), b.ptr(), c1.ptr(), 0.0f);
    omp_set_num_threads(4);
    kernels::par::gemm(false, false, m, n, k, a.ptr(), b.ptr(), c2.ptr(), 0.0f);
    omp_set_num_threads(saved);
    for (int64_t i = 0; i < c1.numel(); ++i) CHECK(c1.data[i] == c2.data[i]);
}

TEST_CASE("gradcheck: linear / elementwise / shape ops") {
    Rng rng(10);
    ParamStore ps;
    Var x = rand_param(ps, "x", {2, 3, 4}, rng);
    Var w = rand_param(ps, "w", {4, 5}, rng);
    Var b = rand_param(ps, "b", {5}, rng);
    Var tgt = make_input(rand_tensor({2, 3, 5}, rng));

    SUBCASE("linear with bias") {
        gradcheck(ps.list, [&](Tape& tp) { return mse(tp, linear(tp, x, w, b), tgt); });
    }
    SUBCASE("linear without bias") {
        gradcheck({x, w}, [&](Tape& tp) { return mse(tp, linear(tp, x, w, nullptr), tgt); });
    }
    SUBCASE("add sub scale add_scaled") {
        Var y = rand_param(ps, "y", {2, 3, 4}, rng);
        Var t2 = make_input(rand_tensor({2, 3, 4}, rng));
        gradcheck({x, y}, [&](Tape& tp) {
            Var s = add(tp, x, y);
            s = sub(tp, s, scale(tp, x, 0.5f));
            s = add_scaled(tp, s, 2.0f, y, -3.0f);
            return mse(tp, s, t2);
        });
    }
    SUBCASE("reshape slice concat") {
        Var y = rand_param(ps, "y2", {2, 2, 4}, rng);
        Var t3 = make_input(rand_tensor({2, 5, 4}, rng));
        gradcheck({x, y}, [&](Tape& tp) {
            Var c = concat_tokens(tp, {x, y});
            Var s = slice_tokens(tp, c, 0, 5);
            return mse(tp, s, t3);
        });
    }
}

TEST_CASE("gradcheck: activations and norms") {
    Rng rng(11);
    ParamStore ps;
    Var x = rand_param(ps, "x", {3, 6}, rng);
    Var g = ps.add("g", rand_tensor({6}, rng, 0.5f, 1.5f));
    Var be = rand_param(ps, "be", {6}, rng);
    Var tgt = make_input(rand_tensor({3, 6}, rng));
    SUBCASE("layer_norm") {
        gradcheck(ps.list, [&](Tape& tp) { return mse(tp, layer_norm(tp, x, g, be), tgt); },
                  1e-2f, 3e-2f);
    }
    SUBCASE("gelu") {
        gradcheck({x}, [&](Tape& tp) { return mse(tp, gelu(tp, x), tgt); });
    }
    SUBCASE("sigmoid") {
        gradcheck({x}, [&](Tape& tp) { return mse(tp, sigmoid(tp, x), tgt); });
    }
}

TEST_CASE("gradcheck: token embedding helpers") {
    Rng rng(12);
    ParamStore ps;
    Var x = rand_param(ps, "x", {2, 4, 3}, rng);
    Var table = rand_param(ps, "table", {5, 3}, rng);
    Var v = rand_param(ps, "v", {2, 3}, rng);
    Var tok = rand_param(ps, "tok", {3}, rng);
    Var tgt = make_input(rand_tensor({2, 4, 3}, rng));
    SUBCASE("add_rows_pattern with repeated rows") {
        gradcheck({x, table}, [&](Tape& tp) {
            return mse(tp, add_rows_pattern(tp, x, table, {4, 0, 4, 2}), tgt);
        });
    }
    SUBCASE("add_per_batch_vec") {
        gradcheck({x, v}, [&](Tape& tp) { return mse(tp, add_per_batch_vec(tp, x, v), tgt); });
    }
    SUBCASE("expand_token") {
        gradcheck({tok}, [&](Tape& tp) { return mse(tp, expand_token(tp, tok, 2, 4), tgt); });
    }
    SUBCASE("gather_rows") {
        Var t2 = make_input(rand_tensor({3, 3}, rng));
        gradcheck({table}, [&](Tape& tp) {
            return mse(tp, gather_rows(tp, table, {1, 1, 4}), t2);
        });
    }
}

TEST_CASE("gradcheck: attention") {
    Rng rng(13);
    ParamStore ps;
    int B = 2, L = 5, D = 8, H = 2;
    Var x = rand_param(ps, "x", {B, L, D}, rng);
    Var wqkv = rand_param(ps, "wqkv", {D, 3 * D}, rng);
    Var bqkv = rand_param(ps, "bqkv", {3 * D}, rng);
    Var wo = rand_param(ps, "wo", {D, D}, rng);
    Var bo = rand_param(ps, "bo", {D}, rng);
    Var tgt = make_input(rand_tensor({B, L, D}, rng));
    SUBCASE("self_attention") {
        gradcheck(ps.list, [&](Tape& tp) {
            return mse(tp, self_attention(tp, x, wqkv, bqkv, wo, bo, H), tgt);
        }, 1e-2f, 3e-2f);
    }
    SUBCASE("cross_attention") {
        int Lk = 4;
        Var kv = rand_param(ps, "kv", {B, Lk, D}, rng);
        Var wq = rand_param(ps, "wq", {D, D}, rng);
        Var bq = rand_param(ps, "bq", {D}, rng);
        Var wkv = rand_param(ps, "wkv", {D, 2 * D}, rng);
        Var bkv = rand_param(ps, "bkv", {2 * D}, rng);
        gradcheck({x, kv, wq, bq, wkv, bkv, wo, bo}, [&](Tape& tp) {
            return mse(tp, cross_attention(tp, x, kv, wq, bq, wkv, bkv, wo, bo, H), tgt);
        }, 1e-2f, 3e-2f);
    }
}

TEST_CASE("gradcheck: convolutions and patch ops") {
    Rng rng(14);
    ParamStore ps;
    SUBCASE("conv2d") {
        Var x = rand_param(ps, "x", {2, 2, 5, 4}, rng);
        Var k = rand_param(ps, "k", {3, 2, 3, 3}, rng);
        Var b = rand_param(ps, "b", {3}, rng);
        Var tgt = make_input(rand_tensor({2, 3, 3, 2}, rng));
        gradcheck(ps.list, [&](Tape& tp) { return mse(tp, conv2d(tp, x, k, b, 2, 1), tgt); });
    }
    SUBCASE("conv_transpose2d") {
        Var x = rand_param(ps, "x", {2, 3, 3, 2}, rng);
        Var k = rand_param(ps, "k", {3, 2, 4, 4}, rng);
        Var b = rand_param(ps, "b", {2}, rng);
        Var tgt = make_input(rand_tensor({2, 2, 6, 4}, rng));
        gradcheck(ps.list, [&](Tape& tp) {
            return mse(tp, conv_transpose2d(tp, x, k, b, 2, 1), tgt);
        });
    }
    SUBCASE("patchify roundtrip and grads") {
        Var img = rand_param(ps, "img", {2, 4, 4, 3}, rng);
        {
            Tape tp;
            Var tok = patchify(tp, img, 2);
            CHECK(tok->val.shape == std::vector<int>{2, 4, 12});
            Var back = unpatchify(tp, tok, 2, 4, 4, 3);
            for (int64_t i = 0; i < img->val.numel(); ++i)
                CHECK(back->val.data[i] == img->val.data[i]);
        }
        Var tgt = make_input(rand_tensor({2, 4, 12}, rng));
        gradcheck({img}, [&](Tape& tp) { return mse(tp, patchify(tp, img, 2), tgt); });
        Var tgt2 = make_input(rand_tensor({2, 4, 4, 3}, rng));
        Var tok_p = rand_param(ps, "tok", {2, 4, 12}, rng);
        gradcheck({tok_p}, [&](Tape& tp) {
            return mse(tp, unpatchify(tp, tok_p, 2, 4, 4, 3), tgt2);
        });
    }
    SUBCASE("nearest_upsample_2x") {
        Var x = rand_param(ps, "xu", {2, 2, 3, 2}, rng);
        Var tgt = make_input(rand_tensor({2, 4, 6, 2}, rng));
        {
            Tape tp;
            Var y = nearest_upsample_2x(tp, x);
            CHECK(y->val.shape == std::vector<int>{2, 4, 6, 2});
            CHECK(y->val.at(0, 1, 1, 0) == x->val.at(0, 0, 0, 0));
            CHECK(y->val.at(1, 3, 5, 1) == x->val.at(1, 1, 2, 1));
        }
        gradcheck({x}, [&](Tape& tp) { return mse(tp, nearest_upsample_2x(tp, x), tgt); });
    }
    SUBCASE("token_resample") {
        Var x = rand_param(ps, "xr", {2, 4, 3}, rng);
        Var a = rand_param(ps, "a", {6, 4}, rng);
        Var tgt = make_input(rand_tensor({2, 6, 3}, rng));
        gradcheck({x, a}, [&](Tape& tp) { return mse(tp, token_resample(tp, x, a), tgt); });
    }
}

TEST_CASE("straight-through estimator passes gradients and values correctly") {
    Rng rng(15);
    ParamStore ps;
    Var z = rand_param(ps, "z", {2, 3}, rng);
    Tensor q = rand_tensor({2, 3}, rng);
    Tape tp;
    Var st = straight_through(tp, z, q);
    for (int64_t i = 0; i < q.numel(); ++i) CHECK(st->val.data[i] == q.data[i]);
    Var tgt = make_input(Tensor({2, 3}));
    Var loss = mse(tp, st, tgt);
    tp.backward(loss);
    // d loss / d z == identity pass-through of d loss / d st == 2/N * q
    for (int64_t i = 0; i < q.numel(); ++i)
        CHECK(z->grad.data[i] == doctest::Approx(2.0f / 6.0f * q.data[i]));
    // detach blocks gradients entirely
    ParamStore ps2;
    Var z2 = ps2.add("z2", rand_tensor({2, 2}, rng));
    Tape tp2;
    Var d = detach(tp2, z2);
    CHECK_FALSE(d->requires_grad);
}

TEST_CASE("gradcheck: two-block transformer composite") {
    Rng rng(16);
    ParamStore ps;
    int D = 8;
    nn::TransformerStack stack(ps, "stk", 2, D, 2, 2, rng);
    nn::Linear head(ps, "head", D, 3, rng);
    Var x = ps.add("x", rand_tensor({2, 4, D}, rng));
    Var tgt = make_input(rand_tensor({2, 4, 3}, rng));
    // check a subset: input, one attention weight, one mlp weight, one norm
    std::vector<Var> subset = {x, stack.blocks[0].attn.wqkv, stack.blocks[1].mlp.fc1.w,
                               stack.blocks[0].ln1.gamma, head.w};
    gradcheck(subset, [&](Tape& tp) { return mse(tp, head(tp, stack(tp, x)), tgt); }, 1e-2f,
              3e-2f);
}

TEST_CASE("forward and backward are bitwise deterministic") {
    Rng rng(17);
    ParamStore ps;
    nn::Block blk(ps, "b", 8, 2, 2, rng);
    Var x = ps.add("x", rand_tensor({2, 6, 8}, rng));
    Var tgt = make_input(rand_tensor({2, 6, 8}, rng));
    auto run = [&](int threads) {
        omp_set_num_threads(threads);
        ps.zero_grads();
        Tape tp;
        Var loss = mse(tp, blk(tp, x), tgt);
        tp.backward(loss);
        std::vector<float> out;
        out.push_back(loss->val.data[0]);
        for (auto& p : ps.list)
            for (float g : p->grad.data) out.push_back(g);
        return out;
    };
    int saved = omp_get_max_threads();
    auto a = run(1);
    auto b = run(4);
    auto c = run(1);
    omp_set_num_threads(saved);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == b[i]);
        CHECK(a[i] == c[i]);
    }
}

TEST_CASE("adamw converges on a quadratic and respects group lrs") {
    ParamStore ps;
    Rng rng(18);
    Var w = ps.add("w", rand_tensor({4, 4}, rng));
    Var target = make_input(rand_tensor({4, 4}, rng));
    nn::AdamW opt;
    opt.weight_decay = 0.0f;
    opt.add_group({w}, 5e-2f);
    for (int step = 0; step < 400; ++step) {
        opt.zero_grads();
        Tape tp;
        Var loss = mse(tp, straight_through(tp, w, w->val), target);
        tp.backward(loss);
        opt.step();
    }
    for (int64_t i = 0; i < w->val.numel(); ++i)
        CHECK(std::fabs(w->val.data[i] - target->val.data[i]) < 1e-2f);
}

TEST_CASE("adamw weight decay applies to matrices only") {
    ParamStore ps;
    Var w = ps.add("w", Tensor({2, 2}, 1.0f));
    Var b = ps.add("b", Tensor({2}, 1.0f));
    nn::AdamW opt;
    opt.weight_decay = 0.1f;
    opt.add_group({w, b}, 1e-2f);
    // no gradients: only decay should move the matrix
    opt.step();
    CHECK(w->val.data[0] == doctest::Approx(1.0f - 1e-2f * 0.1f));
    CHECK(b->val.data[0] == 1.0f);
}

TEST_CASE("gradient clipping scales to the requested global norm") {
    ParamStore ps;
    Var a = ps.add("a", Tensor({3}));
    Var b = ps.add("b", Tensor({4}));
    a->ensure_grad();
    b->ensure_grad();
    for (auto& g : a->grad.data) g = 3.0f;
    for (auto& g : b->grad.data) g = 4.0f;
    nn::AdamW opt;
    opt.add_group({a, b}, 1e-3f);
    double norm = opt.global_grad_norm();
    CHECK(norm == doctest::Approx(std::sqrt(3 * 9.0 + 4 * 16.0)));
    opt.clip_grad_norm(1.0f);
    CHECK(opt.global_grad_norm() == doctest::Approx(1.0).epsilon(1e-4));
    // already-small gradients are untouched
    for (auto& g : a->grad.data) g = 1e-3f;
    for (auto& g : b->grad.data) g = 1e-3f;
    double before = opt.global_grad_norm();
    opt.clip_grad_norm(1.0f);
    CHECK(opt.global_grad_norm() == before);
}

TEST_CASE("zero-init helpers produce exact no-op condition rows") {
    Rng rng(19);
    ParamStore ps;
    Var w = ps.add("w", rand_tensor({6, 4}, rng));
    zero_init_rows(w, {2, 5});
    for (int j = 0; j < 4; ++j) {
        CHECK(w->val.at(2, j) == 0.0f);
        CHECK(w->val.at(5, j) == 0.0f);
        CHECK(w->val.at(0, j) != 0.0f);
    }
    // with zeroed rows, inputs on those channels cannot affect the output
    Tensor x1({1, 6}), x2({1, 6});
    for (int i = 0; i < 6; ++i) x1.data[i] = (float)i;
    x2 = x1;
    x2.data[2] = 99.0f;
    x2.data[5] = -99.0f;
    Tape tp;
    Var y1 = linear(tp, make_input(x1), w, nullptr);
    Var y2 = linear(tp, make_input(x2), w, nullptr);
    for (int j = 0; j < 4; ++j) CHECK(y1->val.data[j] == y2->val.data[j]);
}
