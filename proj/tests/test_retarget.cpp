#include "doctest.h"

#include "imanim/retarget/retarget.hpp"

#include "gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

using namespace imanim;
using namespace imanim::retarget;

namespace {

Tensor random_frames(int T, int H, int W, uint64_t seed) {
    Rng rng(seed);
    Tensor x({T, H, W, 3});
    for (auto& v : x.data) v = rng.uniform(0.0f, 1.0f);
    return x;
}

// micro geometry small enough for finite differences: 8x8 frames, 2x2 codec
// blocks, 2x2 latent patches -> a 2x2 token grid per frame
RetargetConfig micro_cfg() {
    RetargetConfig c;
    c.H = c.W = 8;
    c.f = 2;
    c.p_l = 2;
    c.D = 8;
    c.heads = 2;
    c.ff_ratio = 2;
    c.depth = 1;
    c.N_m = 2;
    c.C_m = 2;
    c.T_max = 2;
    return c;
}

motok::MotokConfig micro_tok_cfg() {
    motok::MotokConfig c;
    c.H = c.W = 8;
    c.patch = 4;
    c.D = 8;
    c.heads = 2;
    c.ff_ratio = 2;
    c.enc_depth = 1;
    c.dec_depth = 1;
    c.N_m = 2;
    c.C_m = 2;
    c.K = 4;
    c.J = 2;
    c.seed_hw = 2;
    return c;
}

}  // namespace

TEST_CASE("codec: analysis/synthesis round trip is lossless to float precision") {
    LatentCodec codec;  // f = 4
    Tensor x = random_frames(2, 64, 64, 11);
    Tensor z = codec.encode(x);
    REQUIRE(z.shape == std::vector<int>{2, 16, 16, 48});
    Tensor y = codec.decode(z);
    REQUIRE(y.shape == x.shape);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(std::fabs(y.data[(size_t)i] - x.data[(size_t)i]) <= 1e-5f);

    LatentCodec small{2};
    Tensor xs = random_frames(1, 8, 8, 12);
    Tensor zs = small.encode(xs);
    REQUIRE(zs.shape == std::vector<int>{1, 4, 4, 12});
    Tensor ys = small.decode(zs);
    for (int64_t i = 0; i < xs.numel(); ++i)
        CHECK(std::fabs(ys.data[(size_t)i] - xs.data[(size_t)i]) <= 1e-5f);
}

TEST_CASE("codec: plain white frame maps to exactly zero latents") {
    LatentCodec codec;
    Tensor white({1, 64, 64, 3}, 1.0f);
    Tensor z = codec.encode(white);
    for (float v : z.data) CHECK(v == 0.0f);
    // and synthesis of the zero latent gives back the white frame exactly
    Tensor back = codec.decode(z);
    for (float v : back.data) CHECK(v == 1.0f);
}

TEST_CASE("codec: orthonormal transform preserves centered energy") {
    LatentCodec codec;
    Tensor x = random_frames(1, 32, 32, 13);
    Tensor z = codec.encode(x);
    double ex = 0.0, ez = 0.0;
    for (float v : x.data) ex += ((double)v - 1.0) * ((double)v - 1.0);
    for (float v : z.data) ez += (double)v * (double)v;
    // encode scales coefficients by 0.5, so energy shrinks by 0.25
    CHECK(ez == doctest::Approx(0.25 * ex).epsilon(1e-5));
}

TEST_CASE("codec: DC impulse synthesizes a flat offset over exactly one block") {
    LatentCodec codec;
    Tensor z({1, 2, 2, 48});
    z.at(0, 0, 0, 0) = 0.5f;  // DC coefficient, channel 0, top-left block
    Tensor y = codec.decode(z);
    // 2 * 0.5 * (1/sqrt(4))^2 = 0.25 over the 4x4 block, on the white base
    for (int py = 0; py < 8; ++py)
        for (int px = 0; px < 8; ++px)
            for (int c = 0; c < 3; ++c) {
                float expect = (py < 4 && px < 4 && c == 0) ? 1.25f : 1.0f;
                CHECK(y.at(0, py, px, c) == expect);
            }
}

TEST_CASE("codec: a pixel edit stays inside its own block's latent cell") {
    LatentCodec codec;
    Tensor a = random_frames(1, 64, 64, 14);
    Tensor b = a;
    b.at(0, 10, 50, 1) += 0.25f;  // block row 2, block col 12
    Tensor za = codec.encode(a), zb = codec.encode(b);
    int diff_cells = 0;
    for (int by = 0; by < 16; ++by)
        for (int bx = 0; bx < 16; ++bx) {
            bool differs = false;
            for (int c = 0; c < 48; ++c)
                if (za.at(0, by, bx, c) != zb.at(0, by, bx, c)) differs = true;
            if (differs) {
                ++diff_cells;
                CHECK(by == 2);
                CHECK(bx == 12);
            }
        }
    CHECK(diff_cells == 1);
}

TEST_CASE("codec: shape validation") {
    LatentCodec codec;
    CHECK_THROWS_AS(codec.encode(Tensor({1, 63, 64, 3})), std::invalid_argument);
    CHECK_THROWS_AS(codec.encode(Tensor({1, 64, 64, 1})), std::invalid_argument);
    CHECK_THROWS_AS(codec.decode(Tensor({1, 16, 16, 47})), std::invalid_argument);
}

TEST_CASE("reference encoder: token count, determinism, locality") {
    ParamStore ps;
    Rng rng(21);
    RetargetConfig cfg;
    cfg.depth = 1;
    Retargeter ret(ps, cfg, rng);
    REQUIRE(cfg.grid() == 8);
    REQUIRE(cfg.P() == 64);

    Tensor frame = random_frames(1, 64, 64, 22).reshaped({64, 64, 3});
    Tape tp;
    Var r1 = ret.encode_reference(tp, frame);
    REQUIRE(r1->val.shape == std::vector<int>{1, 64, 128});
    Var r2 = ret.encode_reference(tp, frame);
    for (int64_t i = 0; i < r1->val.numel(); ++i)
        CHECK(r1->val.data[(size_t)i] == r2->val.data[(size_t)i]);

    CHECK_THROWS_AS(ret.encode_reference(tp, Tensor({63, 64, 3})), std::invalid_argument);

    // before any attention runs, editing one pixel can only touch the single
    // token whose codec blocks cover it
    auto touched_tokens = [&](int py, int px) {
        Tensor edit = frame;
        edit.at(py, px, 0) += 0.3f;
        Tape t2;
        Var re = ret.encode_reference(t2, edit);
        std::vector<int> moved;
        for (int tok = 0; tok < 64; ++tok) {
            for (int d = 0; d < 128; ++d)
                if (re->val.at(0, tok, d) != r1->val.at(0, tok, d)) {
                    moved.push_back(tok);
                    break;
                }
        }
        return moved;
    };
    auto m1 = touched_tokens(0, 0);  // codec cell (0,0) -> patch (0,0) -> token 0
    REQUIRE(m1.size() == 1);
    CHECK(m1[0] == 0);
    auto m2 = touched_tokens(10, 50);  // cell (2,12) -> patch (1,6) -> token 14
    REQUIRE(m2.size() == 1);
    CHECK(m2[0] == 14);
}

TEST_CASE("motion assembly: shape contract and validation") {
    ParamStore ps;
    Rng rng(31);
    RetargetConfig cfg;
    cfg.depth = 1;
    Retargeter ret(ps, cfg, rng);

    Tape tp;
    Tensor v({8, 32, 64});
    Rng vr(32);
    for (auto& e : v.data) e = vr.normal(0.0f, 1.0f);
    Var seq = ret.assemble_motion_sequence(tp, make_input(v));
    CHECK(seq->val.shape == std::vector<int>{1, 256, 128});

    CHECK_THROWS_AS(ret.assemble_motion_sequence(tp, make_input(Tensor({8, 31, 64}))),
                    std::invalid_argument);
    CHECK_THROWS_AS(ret.assemble_motion_sequence(tp, make_input(Tensor({8, 32, 63}))),
                    std::invalid_argument);
    CHECK_THROWS_AS(ret.assemble_motion_sequence(tp, make_input(Tensor({9, 32, 64}))),
                    std::invalid_argument);  // beyond the frame-index table
    CHECK_THROWS_AS(ret.assemble_motion_sequence(tp, make_input(Tensor({0, 32, 64}))),
                    std::invalid_argument);
}

TEST_CASE("motion assembly: frame index is positional metadata only") {
    ParamStore ps;
    Rng rng(41);
    RetargetConfig cfg = micro_cfg();
    Retargeter ret(ps, cfg, rng);

    // the same per-frame content at two frame positions differs exactly by
    // the frame-embedding rows
    Tensor v({2, cfg.N_m, cfg.C_m});
    Rng vr(42);
    for (int l = 0; l < cfg.N_m; ++l)
        for (int c = 0; c < cfg.C_m; ++c) {
            float val = vr.normal(0.0f, 1.0f);
            v.at(0, l, c) = val;
            v.at(1, l, c) = val;
        }
    Tape tp;
    Var seq = ret.assemble_motion_sequence(tp, make_input(v));
    const Tensor& frame_emb = ps.get("retarget.frame")->val;
    for (int l = 0; l < cfg.N_m; ++l)
        for (int d = 0; d < cfg.D; ++d) {
            float diff = seq->val.at(0, l, d) - seq->val.at(0, cfg.N_m + l, d);
            float expect = frame_emb.at(0, d) - frame_emb.at(1, d);
            CHECK(diff == doctest::Approx(expect).epsilon(0).scale(1.0).epsilon(1e-5));
        }
}

TEST_CASE("retarget: joint pass shapes and frame-count flexibility") {
    ParamStore ps;
    Rng rng(51);
    RetargetConfig cfg;
    cfg.depth = 1;
    Retargeter ret(ps, cfg, rng);

    // token budget at full length: 8*32 motion + 64 ref + 8*64 mask = 832
    CHECK(8 * cfg.N_m + cfg.P() + 8 * cfg.P() == 832);

    Tensor frame = random_frames(1, 64, 64, 52).reshaped({64, 64, 3});
    Rng vr(53);

    for (int T : {8, 3}) {
        Tensor v({T, 32, 64});
        for (auto& e : v.data) e = vr.normal(0.0f, 1.0f);
        Tape tp;
        Var seq = ret.assemble_motion_sequence(tp, make_input(v));
        Var ref = ret.encode_reference(tp, frame);
        Var out = ret.retarget(tp, seq, ref, T);
        CHECK(out->val.shape == std::vector<int>{T, 8, 8, 128});
    }

    // mismatched frame count against an assembled sequence is rejected
    Tape tp;
    Tensor v({2, 32, 64});
    for (auto& e : v.data) e = vr.normal(0.0f, 1.0f);
    Var seq = ret.assemble_motion_sequence(tp, make_input(v));
    Var ref = ret.encode_reference(tp, frame);
    CHECK_THROWS_AS(ret.retarget(tp, seq, ref, 1), std::invalid_argument);
    CHECK_THROWS_AS(ret.retarget(tp, seq, ref, 9), std::invalid_argument);
    CHECK_THROWS_AS(ret.retarget(tp, make_input(Tensor({1, 64, 127})), ref, 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(ret.retarget(tp, seq, make_input(Tensor({1, 63, 128})), 2),
                    std::invalid_argument);
}

TEST_CASE("retarget: zero-depth pass returns the typed mask embeddings untouched") {
    ParamStore ps;
    Rng rng(61);
    RetargetConfig cfg;
    cfg.depth = 0;
    Retargeter ret(ps, cfg, rng);

    int T = 2;
    Tensor v({T, 32, 64});
    Rng vr(62);
    for (auto& e : v.data) e = vr.normal(0.0f, 1.0f);
    Tensor frame = random_frames(1, 64, 64, 63).reshaped({64, 64, 3});

    Tape tp;
    Var seq = ret.assemble_motion_sequence(tp, make_input(v));
    Var ref = ret.encode_reference(tp, frame);
    Var out = ret.retarget(tp, seq, ref, T);
    REQUIRE(out->val.shape == std::vector<int>{T, 8, 8, 128});

    const Tensor& mask = ps.get("retarget.mask_token")->val;
    const Tensor& type = ps.get("retarget.type")->val;
    const Tensor& frame_emb = ps.get("retarget.frame")->val;
    const Tensor& grid = ps.get("retarget.grid_slot")->val;
    for (int t = 0; t < T; ++t)
        for (int gy = 0; gy < 8; ++gy)
            for (int gx = 0; gx < 8; ++gx)
                for (int d = 0; d < 128; ++d) {
                    int p = gy * 8 + gx;
                    float e = mask.at(d) + type.at(2, d);  // same addition order
                    e = e + frame_emb.at(t, d);
                    e = e + grid.at(p, d);
                    REQUIRE(out->val.at(t, gy, gx, d) == e);
                }

    // without attention the reference cannot reach the output at all: the
    // mask positions are the only ones sliced out
    Tensor frame2 = random_frames(1, 64, 64, 64).reshaped({64, 64, 3});
    Tape tp2;
    Var seq2 = ret.assemble_motion_sequence(tp2, make_input(v));
    Var ref2 = ret.encode_reference(tp2, frame2);
    Var out2 = ret.retarget(tp2, seq2, ref2, T);
    for (int64_t i = 0; i < out->val.numel(); ++i)
        REQUIRE(out2->val.data[(size_t)i] == out->val.data[(size_t)i]);
}

TEST_CASE("retarget: with attention, reference and type tables shape the output") {
    ParamStore ps;
    Rng rng(71);
    RetargetConfig cfg = micro_cfg();
    Retargeter ret(ps, cfg, rng);

    int T = 2;
    Tensor v({T, cfg.N_m, cfg.C_m});
    Rng vr(72);
    for (auto& e : v.data) e = vr.normal(0.0f, 1.0f);
    Tensor fa = random_frames(1, 8, 8, 73).reshaped({8, 8, 3});
    Tensor fb = random_frames(1, 8, 8, 74).reshaped({8, 8, 3});

    auto run = [&]() {
        Tape tp;
        Var seq = ret.assemble_motion_sequence(tp, make_input(v));
        Var ref = ret.encode_reference(tp, fa);
        return ret.retarget(tp, seq, ref, T)->val;
    };
    Tensor base = run();

    // determinism
    Tensor again = run();
    for (int64_t i = 0; i < base.numel(); ++i)
        CHECK(again.data[(size_t)i] == base.data[(size_t)i]);

    // a different reference frame changes the retargeted latents
    {
        Tape tp;
        Var seq = ret.assemble_motion_sequence(tp, make_input(v));
        Var ref = ret.encode_reference(tp, fb);
        Tensor other = ret.retarget(tp, seq, ref, T)->val;
        double md = 0.0;
        for (int64_t i = 0; i < base.numel(); ++i)
            md = std::max(md, (double)std::fabs(other.data[(size_t)i] - base.data[(size_t)i]));
        CHECK(md > 1e-6);
    }

    // swapping the motion/reference type rows changes the mix: the role
    // tags are consulted, not decorative
    {
        Tensor& type = ps.get("retarget.type")->val;
        for (int d = 0; d < cfg.D; ++d) std::swap(type.at(0, d), type.at(1, d));
        Tensor swapped = run();
        for (int d = 0; d < cfg.D; ++d) std::swap(type.at(0, d), type.at(1, d));
        double md = 0.0;
        for (int64_t i = 0; i < base.numel(); ++i)
            md = std::max(md, (double)std::fabs(swapped.data[(size_t)i] - base.data[(size_t)i]));
        CHECK(md > 1e-6);
        // and the swap was restored
        Tensor restored = run();
        for (int64_t i = 0; i < base.numel(); ++i)
            CHECK(restored.data[(size_t)i] == base.data[(size_t)i]);
    }
}

TEST_CASE("joint decoding: shared decoder shape and per-frame independence") {
    ParamStore ps;
    Rng rng(81);
    RetargetConfig cfg;
    cfg.depth = 1;
    Retargeter ret(ps, cfg, rng);
    motok::MotokConfig tc;  // defaults match the retarget defaults: N_m=32, D=128
    motok::MotionTokenizer tok(ps, tc, rng);

    Tensor lat({2, 8, 8, 128});
    Rng vr(82);
    for (auto& e : lat.data) e = vr.normal(0.0f, 0.5f);

    Tape tp;
    Var h1 = ret.decode_retargeted_joints(tp, make_input(lat), tok);
    REQUIRE(h1->val.shape == std::vector<int>{2, 14, 32, 32});
    for (float v : h1->val.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    CHECK_THROWS_AS(ret.decode_retargeted_joints(tp, make_input(Tensor({2, 8, 7, 128})), tok),
                    std::invalid_argument);

    // frames decode as independent batch rows: perturbing frame 1 leaves
    // frame 0 bitwise unchanged
    Tensor lat2 = lat;
    for (int gy = 0; gy < 8; ++gy)
        for (int gx = 0; gx < 8; ++gx)
            for (int d = 0; d < 128; ++d) lat2.at(1, gy, gx, d) += 0.125f;
    Tape tp2;
    Var h2 = ret.decode_retargeted_joints(tp2, make_input(lat2), tok);
    bool frame1_differs = false;
    for (int j = 0; j < 14; ++j)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                REQUIRE(h2->val.at(0, j, y, x) == h1->val.at(0, j, y, x));
                if (h2->val.at(1, j, y, x) != h1->val.at(1, j, y, x)) frame1_differs = true;
            }
    CHECK(frame1_differs);
}

TEST_CASE("retargeting loss matches the tokenizer's heatmap error") {
    Tape tp;
    Tensor p({1, 1, 2, 2}), g({1, 1, 2, 2});
    p.at(0, 0, 0, 0) = 1.0f;
    g.at(0, 0, 0, 1) = 1.0f;
    Var loss = stage2_loss(tp, make_input(p), make_input(g));
    CHECK(loss->val.at(0) == doctest::Approx(0.5f).epsilon(1e-7));  // (1+1)/4
    Var zero = stage2_loss(tp, make_input(p), make_input(p));
    CHECK(zero->val.at(0) == 0.0f);
}

TEST_CASE("gradcheck: end-to-end retarget pipeline") {
    ParamStore ps;
    Rng rng(91);
    RetargetConfig cfg = micro_cfg();
    Retargeter ret(ps, cfg, rng);
    motok::MotokConfig tc = micro_tok_cfg();
    motok::MotionTokenizer tok(ps, tc, rng);

    int T = 2;
    Tensor mv({T, cfg.N_m, cfg.C_m});
    Rng vr(92);
    for (auto& e : mv.data) e = vr.normal(0.0f, 1.0f);
    Var motion = ps.add("test.motion", std::move(mv));

    Tensor frame = random_frames(1, 8, 8, 93).reshaped({8, 8, 3});
    Tensor gt({T, tc.J, tc.heat(), tc.heat()});
    for (auto& e : gt.data) e = vr.uniform(0.0f, 1.0f);

    auto build = [&](Tape& tp) {
        Var seq = ret.assemble_motion_sequence(tp, motion);
        Var refv = ret.encode_reference(tp, frame);
        Var lat = ret.retarget(tp, seq, refv, T);
        Var heat = ret.decode_retargeted_joints(tp, lat, tok);
        return stage2_loss(tp, heat, make_input(gt));
    };

    std::vector<Var> params = {
        ps.get("retarget.mask_token"), ps.get("retarget.type"),
        ps.get("retarget.frame"),      ps.get("retarget.adapter"),
        ps.get("retarget.ref_proj.w"), ps.get("retarget.motion_proj.w"),
        ps.get("retarget.grid_slot"),  ps.get("test.motion"),
    };
    imanim::testing::gradcheck(params, build);
}
