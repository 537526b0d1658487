#include "imanim/retarget/retarget.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace imanim::retarget {

namespace {

// orthonormal DCT-II basis, rows are frequencies
std::vector<double> dct_basis(int f) {
    std::vector<double> b((size_t)f * f);
    for (int k = 0; k < f; ++k) {
        double s = std::sqrt((k == 0 ? 1.0 : 2.0) / (double)f);
        for (int n = 0; n < f; ++n)
            b[(size_t)(k * f + n)] = s * std::cos(M_PI * (2.0 * n + 1.0) * k / (2.0 * f));
    }
    return b;
}

std::vector<int> iota_idx(int n) {
    std::vector<int> v((size_t)n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

Tensor LatentCodec::encode(const Tensor& frames) const {
    if (frames.ndim() != 4 || frames.shape[3] != 3 || frames.shape[1] % f != 0 ||
        frames.shape[2] % f != 0)
        throw std::invalid_argument("LatentCodec::encode: expected (T, H, W, 3), f | H, W");
    int T = frames.shape[0], H = frames.shape[1], W = frames.shape[2];
    int gh = H / f, gw = W / f;
    Tensor out({T, gh, gw, c_l()});
    const std::vector<double> B = dct_basis(f);

#pragma omp parallel for schedule(static)
    for (int64_t cell = 0; cell < (int64_t)T * gh * gw; ++cell) {
        int t = (int)(cell / (gh * gw));
        int by = (int)(cell / gw % gh), bx = (int)(cell % gw);
        for (int c = 0; c < 3; ++c) {
            double block[16], tmp[16];
            for (int y = 0; y < f; ++y)
                for (int x = 0; x < f; ++x)
                    block[y * f + x] = (double)frames.at(t, by * f + y, bx * f + x, c) - 1.0;
            // tmp = B . block ; coef = tmp . B^T
            for (int k = 0; k < f; ++k)
                for (int x = 0; x < f; ++x) {
                    double s = 0.0;
                    for (int n = 0; n < f; ++n) s += B[(size_t)(k * f + n)] * block[n * f + x];
                    tmp[k * f + x] = s;
                }
            for (int ky = 0; ky < f; ++ky)
                for (int kx = 0; kx < f; ++kx) {
                    double s = 0.0;
                    for (int n = 0; n < f; ++n) s += tmp[ky * f + n] * B[(size_t)(kx * f + n)];
                    out.at(t, by, bx, (ky * f + kx) * 3 + c) = (float)(0.5 * s);
                }
        }
    }
    return out;
}

Tensor LatentCodec::decode(const Tensor& latents) const {
    if (latents.ndim() != 4 || latents.shape[3] != c_l())
        throw std::invalid_argument("LatentCodec::decode: expected (T, gh, gw, f*f*3)");
    int T = latents.shape[0], gh = latents.shape[1], gw = latents.shape[2];
    Tensor out({T, gh * f, gw * f, 3});
    const std::vector<double> B = dct_basis(f);

#pragma omp parallel for schedule(static)
    for (int64_t cell = 0; cell < (int64_t)T * gh * gw; ++cell) {
        int t = (int)(cell / (gh * gw));
        int by = (int)(cell / gw % gh), bx = (int)(cell % gw);
        for (int c = 0; c < 3; ++c) {
            double coef[16], tmp[16];
            for (int ky = 0; ky < f; ++ky)
                for (int kx = 0; kx < f; ++kx)
                    coef[ky * f + kx] = 2.0 * (double)latents.at(t, by, bx, (ky * f + kx) * 3 + c);
            // tmp = B^T . coef ; block = tmp . B
            for (int n = 0; n < f; ++n)
                for (int kx = 0; kx < f; ++kx) {
                    double s = 0.0;
                    for (int k = 0; k < f; ++k) s += B[(size_t)(k * f + n)] * coef[k * f + kx];
                    tmp[n * f + kx] = s;
                }
            for (int y = 0; y < f; ++y)
                for (int x = 0; x < f; ++x) {
                    double s = 0.0;
                    for (int k = 0; k < f; ++k) s += tmp[y * f + k] * B[(size_t)(k * f + x)];
                    out.at(t, by * f + y, bx * f + x, c) = (float)(s + 1.0);
                }
        }
    }
    return out;
}

Retargeter::Retargeter(ParamStore& ps, const RetargetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.H % (cfg.f * cfg.p_l) != 0 || cfg.W % (cfg.f * cfg.p_l) != 0)
        throw std::invalid_argument("retarget: f*p_l must divide the frame");
    if (cfg.D % cfg.heads != 0) throw std::invalid_argument("retarget: D % heads != 0");
    codec_.f = cfg.f;

    int block = cfg.p_l * cfg.p_l * codec_.c_l();
    ref_proj_ = nn::Linear(ps, "retarget.ref_proj", block, cfg.D, rng);
    motion_proj_ = nn::Linear(ps, "retarget.motion_proj", cfg.C_m, cfg.D, rng);

    auto emb = [&](const std::string& name, std::vector<int> shape) {
        Tensor t(std::move(shape));
        nn::normal_init(t, rng, 0.02f);
        return ps.add(name, std::move(t));
    };
    mask_token_ = emb("retarget.mask_token", {cfg.D});
    type_emb_ = emb("retarget.type", {3, cfg.D});
    frame_emb_ = emb("retarget.frame", {cfg.T_max, cfg.D});
    motion_slot_ = emb("retarget.motion_slot", {cfg.N_m, cfg.D});
    grid_slot_ = emb("retarget.grid_slot", {cfg.P(), cfg.D});
    stack_ = nn::TransformerStack(ps, "retarget.stack", cfg.depth, cfg.D, cfg.heads,
                                  cfg.ff_ratio, rng);

    Tensor a({cfg.N_m, cfg.P()}, 1.0f / (float)cfg.P());
    Tensor noise({cfg.N_m, cfg.P()});
    nn::normal_init(noise, rng, 0.02f);
    for (int64_t i = 0; i < a.numel(); ++i) a.data[(size_t)i] += noise.data[(size_t)i];
    adapter_ = ps.add("retarget.adapter", std::move(a));
}

Var Retargeter::encode_reference(Tape& tp, const Tensor& ref_frame) const {
    if (ref_frame.ndim() != 3 || ref_frame.shape[0] != cfg_.H || ref_frame.shape[1] != cfg_.W ||
        ref_frame.shape[2] != 3)
        throw std::invalid_argument("encode_reference: expected (H, W, 3)");
    Tensor one = ref_frame.reshaped({1, cfg_.H, cfg_.W, 3});
    Tensor lat = codec_.encode(one);  // (1, H/f, W/f, c_l)
    Var tokens = patchify(tp, make_input(lat), cfg_.p_l);
    return ref_proj_(tp, tokens);  // (1, P, D)
}

Var Retargeter::assemble_motion_sequence(Tape& tp, Var motion_values) const {
    const Tensor& v = motion_values->val;
    if (v.ndim() != 3 || v.shape[1] != cfg_.N_m || v.shape[2] != cfg_.C_m)
        throw std::invalid_argument("assemble_motion_sequence: expected (T, N_m, C_m)");
    int T = v.shape[0];
    if (T < 1) throw std::invalid_argument("assemble_motion_sequence: empty sequence");
    if (T > cfg_.T_max)
        throw std::invalid_argument("assemble_motion_sequence: sequence exceeds frame table");
    Var seq = reshape(tp, motion_values, {1, T * cfg_.N_m, cfg_.C_m});
    seq = motion_proj_(tp, seq);  // (1, T*N_m, D)

    std::vector<int> frame_idx((size_t)T * cfg_.N_m), slot_idx((size_t)T * cfg_.N_m);
    for (int t = 0; t < T; ++t)
        for (int l = 0; l < cfg_.N_m; ++l) {
            frame_idx[(size_t)(t * cfg_.N_m + l)] = t;
            slot_idx[(size_t)(t * cfg_.N_m + l)] = l;
        }
    seq = add_rows_pattern(tp, seq, frame_emb_, frame_idx);
    seq = add_rows_pattern(tp, seq, motion_slot_, slot_idx);
    return seq;
}

Var Retargeter::retarget(Tape& tp, Var motion_seq, Var ref_tokens, int T) const {
    int P = cfg_.P();
    if (T < 1 || T > cfg_.T_max)
        throw std::invalid_argument("retarget: frame count exceeds configured budget");
    if (motion_seq->val.shape != std::vector<int>{1, T * cfg_.N_m, cfg_.D})
        throw std::invalid_argument("retarget: motion sequence shape mismatch");
    if (ref_tokens->val.shape != std::vector<int>{1, P, cfg_.D})
        throw std::invalid_argument("retarget: reference token shape mismatch");

    Var motion = add_rows_pattern(tp, motion_seq, type_emb_,
                                  std::vector<int>((size_t)T * cfg_.N_m, 0));
    Var ref = add_rows_pattern(tp, ref_tokens, type_emb_, std::vector<int>((size_t)P, 1));
    ref = add_rows_pattern(tp, ref, grid_slot_, iota_idx(P));

    if (!cfg_.mask_tokens) {
        // Baseline: self-attention over [motion ⊕ ref], reference outputs
        // kept and replicated for every frame (no frame identity exists).
        Var seq = concat_tokens(tp, {motion, ref});
        seq = stack_(tp, seq);
        Var out = slice_tokens(tp, seq, T * cfg_.N_m, P);  // (1, P, D)
        Var tiled = concat_tokens(tp, std::vector<Var>((size_t)T, out));
        return reshape(tp, tiled, {T, cfg_.grid(), cfg_.grid(), cfg_.D});
    }

    Var mask = expand_token(tp, mask_token_, 1, T * P);
    std::vector<int> mframe((size_t)T * P), mgrid((size_t)T * P);
    for (int t = 0; t < T; ++t)
        for (int p = 0; p < P; ++p) {
            mframe[(size_t)(t * P + p)] = t;
            mgrid[(size_t)(t * P + p)] = p;
        }
    mask = add_rows_pattern(tp, mask, type_emb_, std::vector<int>((size_t)T * P, 2));
    mask = add_rows_pattern(tp, mask, frame_emb_, mframe);
    mask = add_rows_pattern(tp, mask, grid_slot_, mgrid);

    Var seq = concat_tokens(tp, {motion, ref, mask});
    seq = stack_(tp, seq);
    Var out = slice_tokens(tp, seq, T * cfg_.N_m + P, T * P);  // mask outputs only
    return reshape(tp, out, {T, cfg_.grid(), cfg_.grid(), cfg_.D});
}

Var Retargeter::decode_retargeted_joints(Tape& tp, Var ret_latent,
                                         const motok::MotionTokenizer& tok) const {
    const Tensor& v = ret_latent->val;
    if (v.ndim() != 4 || v.shape[1] != cfg_.grid() || v.shape[2] != cfg_.grid() ||
        v.shape[3] != cfg_.D)
        throw std::invalid_argument("decode_retargeted_joints: expected (T, g, g, D)");
    int T = v.shape[0];
    Var grid_tokens = reshape(tp, ret_latent, {T, cfg_.P(), cfg_.D});
    Var dec_in = token_resample(tp, grid_tokens, adapter_);  // (T, N_m, D)
    return tok.decode_tokens(tp, dec_in);
}

}  // namespace imanim::retarget
