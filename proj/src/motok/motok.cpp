#include "imanim/motok/motok.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace imanim::motok {

namespace {

std::vector<int> iota_idx(int n, int base = 0) {
    std::vector<int> v((size_t)n);
    std::iota(v.begin(), v.end(), base);
    return v;
}

std::vector<int> segment_types(int n_first, int n_second) {
    std::vector<int> v((size_t)(n_first + n_second), 0);
    std::fill(v.begin() + n_first, v.end(), 1);
    return v;
}

Tensor conv_init(std::vector<int> shape, Rng& rng) {
    Tensor k(std::move(shape));
    float fan_in = (float)(k.shape[0] * k.shape[2] * k.shape[3]);
    nn::normal_init(k, rng, 1.0f / std::sqrt(fan_in));
    return k;
}

}  // namespace

CodebookHealth codebook_health(const std::vector<int>& indices, int K) {
    CodebookHealth h;
    h.counts.assign((size_t)K, 0);
    for (int i : indices) {
        if (i < 0 || i >= K) throw std::out_of_range("codebook_health: index out of range");
        ++h.counts[(size_t)i];
    }
    h.total = (int64_t)indices.size();
    double entropy = 0.0;
    for (int64_t c : h.counts) {
        if (c == 0) continue;
        ++h.used;
        double p = (double)c / (double)h.total;
        entropy -= p * std::log(p);
    }
    h.perplexity = h.total > 0 ? std::exp(entropy) : 0.0;
    return h;
}

MotionTokenizer::MotionTokenizer(ParamStore& ps, const MotokConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    if (cfg.K < 1) throw std::invalid_argument("motok: codebook must have at least one row");
    if (cfg.H % cfg.patch != 0 || cfg.W % cfg.patch != 0)
        throw std::invalid_argument("motok: patch size must divide the frame");
    if (cfg.D % cfg.heads != 0) throw std::invalid_argument("motok: D % heads != 0");
    if (cfg.D % (cfg.seed_hw * cfg.seed_hw) != 0)
        throw std::invalid_argument("motok: D must fold into the seed grid");

    int P = cfg.patches();
    int block = cfg.patch * cfg.patch * 3;

    auto emb = [&](const std::string& name, std::vector<int> shape, float std) {
        Tensor t(std::move(shape));
        nn::normal_init(t, rng, std);
        return ps.add(name, std::move(t));
    };

    // Fixed (non-learned) pooling matrix averaging consecutive runs of
    // row-major tokens; keeps the image-locality tie the baselines are
    // meant to exhibit.
    auto run_pool = [](int out_tokens, int in_tokens) {
        if (in_tokens % out_tokens != 0)
            throw std::invalid_argument("motok: token count must divide into N_m for pooling");
        int m = in_tokens / out_tokens;
        Tensor a({out_tokens, in_tokens});
        for (int i = 0; i < out_tokens; ++i)
            for (int j = 0; j < m; ++j) a.at(i, i * m + j) = 1.0f / (float)m;
        return a;
    };

    switch (cfg.encoder) {
        case EncoderKind::kLatentQuery:
            patch_proj_ = nn::Linear(ps, "motok.enc.patch_proj", block, cfg.D, rng);
            latent_tokens_ = emb("motok.enc.latent_tokens", {cfg.N_m, cfg.D}, 0.02f);
            enc_pos_ = emb("motok.enc.pos", {P + cfg.N_m, cfg.D}, 0.02f);
            enc_type_ = emb("motok.enc.type", {2, cfg.D}, 0.02f);
            enc_ = nn::TransformerStack(ps, "motok.enc.stack", cfg.enc_depth, cfg.D, cfg.heads,
                                        cfg.ff_ratio, rng);
            enc_ln_ = nn::LayerNorm(ps, "motok.enc.ln", cfg.D);
            to_code_ = nn::Linear(ps, "motok.enc.to_code", cfg.D, cfg.C_m, rng);
            break;
        case EncoderKind::kPatchPool: {
            if (cfg.H != cfg.W)
                throw std::invalid_argument("motok: patch-pool encoder needs a square frame");
            // Halve the grid while the next stage still holds N_m tokens.
            // Each stage is a non-overlapping stride-2 conv written as
            // patchify(2) + linear.
            int g = cfg.H, c = 3, i = 0;
            while ((g / 2) * (g / 2) >= cfg.N_m) {
                conv_stages_.push_back(nn::Linear(
                    ps, "motok.enc.conv" + std::to_string(i), 4 * c, cfg.D, rng));
                g /= 2;
                c = cfg.D;
                ++i;
            }
            if (conv_stages_.empty())
                throw std::invalid_argument("motok: frame too small for the patch-pool encoder");
            conv_pool_ = run_pool(cfg.N_m, g * g);
            enc_ln_ = nn::LayerNorm(ps, "motok.enc.ln", cfg.D);
            to_code_ = nn::Linear(ps, "motok.enc.to_code", cfg.D, cfg.C_m, rng);
            break;
        }
        case EncoderKind::kRawLatent:
            if (P < cfg.N_m)
                throw std::invalid_argument("motok: raw-latent encoder needs patches >= N_m");
            raw_pool_ = run_pool(cfg.N_m, P);
            raw_proj_ = nn::Linear(ps, "motok.enc.raw_proj", block, cfg.C_m, rng);
            break;
    }

    {
        Tensor cb({cfg.K, cfg.C_m});
        nn::normal_init(cb, rng, 1.0f);
        codebook_ = ps.add("motok.quant.codebook", std::move(cb));
    }
    reset_usage();

    from_code_ = nn::Linear(ps, "motok.dec.from_code", cfg.C_m, cfg.D, rng);
    joint_query_ = emb("motok.dec.joint_query", {cfg.D}, 0.02f);
    dec_pos_ = emb("motok.dec.pos", {cfg.N_m + cfg.J, cfg.D}, 0.02f);
    dec_type_ = emb("motok.dec.type", {2, cfg.D}, 0.02f);
    dec_ = nn::TransformerStack(ps, "motok.dec.stack", cfg.dec_depth, cfg.D, cfg.heads,
                                cfg.ff_ratio, rng);
    dec_ln_ = nn::LayerNorm(ps, "motok.dec.ln", cfg.D);

    int c0 = cfg.D / (cfg.seed_hw * cfg.seed_hw);
    int mid = 16;
    up1_k_ = ps.add("motok.dec.up1.k", conv_init({c0, mid, 4, 4}, rng));
    up1_b_ = ps.add("motok.dec.up1.b", Tensor({mid}));
    up2_k_ = ps.add("motok.dec.up2.k", conv_init({mid, 1, 4, 4}, rng));
    up2_b_ = ps.add("motok.dec.up2.b", Tensor({1}));
}

Var MotionTokenizer::encode_frames(Tape& tp, const Tensor& frames) const {
    if (frames.ndim() != 4 || frames.shape[1] != cfg_.H || frames.shape[2] != cfg_.W ||
        frames.shape[3] != 3)
        throw std::invalid_argument("encode_frames: expected (B, H, W, 3) frames");
    int B = frames.shape[0];
    int P = cfg_.patches();

    Var img = make_input(frames);
    if (cfg_.encoder == EncoderKind::kPatchPool) {
        Var x = img;
        int g = cfg_.H, c = 3;
        for (size_t i = 0; i < conv_stages_.size(); ++i) {
            x = gelu(tp, conv_stages_[i](tp, patchify(tp, x, 2)));
            g /= 2;
            c = cfg_.D;
            if (i + 1 < conv_stages_.size()) x = reshape(tp, x, {B, g, g, c});
        }
        x = token_resample(tp, x, make_input(conv_pool_));  // (B, N_m, D)
        return to_code_(tp, enc_ln_(tp, x));
    }
    if (cfg_.encoder == EncoderKind::kRawLatent) {
        Var x = patchify(tp, img, cfg_.patch);               // (B, P, patch^2*3)
        x = token_resample(tp, x, make_input(raw_pool_));    // (B, N_m, patch^2*3)
        return raw_proj_(tp, x);                             // (B, N_m, C_m)
    }

    Var tok = patch_proj_(tp, patchify(tp, img, cfg_.patch));  // (B, P, D)
    Var lat = add_rows_pattern(tp, make_input(Tensor({B, cfg_.N_m, cfg_.D})), latent_tokens_,
                               iota_idx(cfg_.N_m));
    Var seq = concat_tokens(tp, {tok, lat});
    seq = add_rows_pattern(tp, seq, enc_pos_, iota_idx(P + cfg_.N_m));
    seq = add_rows_pattern(tp, seq, enc_type_, segment_types(P, cfg_.N_m));
    seq = enc_(tp, seq);
    Var lat_out = slice_tokens(tp, seq, P, cfg_.N_m);
    return to_code_(tp, enc_ln_(tp, lat_out));  // (B, N_m, C_m)
}

QuantizeResult MotionTokenizer::quantize(Tape& tp, Var pre_quant) {
    const Tensor& z = pre_quant->val;
    int C = cfg_.C_m;
    if (z.ndim() < 2 || z.shape.back() != C)
        throw std::invalid_argument("quantize: trailing dim must be the code width");
    int64_t n = z.numel() / C;
    std::vector<int> idx((size_t)n);
    const float* cb = codebook_->val.ptr();

#pragma omp parallel for schedule(static)
    for (int64_t v = 0; v < n; ++v) {
        const float* zp = z.ptr() + v * C;
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < cfg_.K; ++k) {
            const float* cp = cb + (int64_t)k * C;
            double d = 0.0;
            for (int c = 0; c < C; ++c) {
                double t = (double)zp[c] - (double)cp[c];
                d += t * t;
            }
            if (d < best_d) {  // strict: ties keep the lowest index
                best_d = d;
                best = k;
            }
        }
        idx[(size_t)v] = best;
    }
    for (int64_t v = 0; v < n; ++v) ++usage_[(size_t)idx[(size_t)v]];

    Tensor q(z.shape);
    for (int64_t v = 0; v < n; ++v)
        std::copy(cb + (int64_t)idx[(size_t)v] * C, cb + ((int64_t)idx[(size_t)v] + 1) * C,
                  q.ptr() + v * C);

    QuantizeResult r;
    r.values = straight_through(tp, pre_quant, std::move(q));
    Var sel = reshape(tp, gather_rows(tp, codebook_, idx), z.shape);
    r.codebook_loss = mse(tp, sel, detach(tp, pre_quant));
    r.commitment_loss = mse(tp, pre_quant, detach(tp, sel));
    r.indices = std::move(idx);
    return r;
}

Var MotionTokenizer::decode_tokens(Tape& tp, Var tokens) const {
    if (tokens->val.ndim() != 3 || tokens->val.shape[1] != cfg_.N_m ||
        tokens->val.shape[2] != cfg_.D)
        throw std::invalid_argument("decode_tokens: expected (B, N_m, D) tokens");
    int B = tokens->val.shape[0];
    Var q = expand_token(tp, joint_query_, B, cfg_.J);
    Var seq = concat_tokens(tp, {tokens, q});
    seq = add_rows_pattern(tp, seq, dec_pos_, iota_idx(cfg_.N_m + cfg_.J));
    seq = add_rows_pattern(tp, seq, dec_type_, segment_types(cfg_.N_m, cfg_.J));
    seq = dec_(tp, seq);
    Var out = dec_ln_(tp, slice_tokens(tp, seq, cfg_.N_m, cfg_.J));  // (B, J, D)

    int s = cfg_.seed_hw, c0 = cfg_.D / (s * s);
    Var maps = reshape(tp, out, {B * cfg_.J, c0, s, s});
    Var u = gelu(tp, conv_transpose2d(tp, maps, up1_k_, up1_b_, 2, 1));
    u = conv_transpose2d(tp, u, up2_k_, up2_b_, 2, 1);
    Var hm = sigmoid(tp, u);
    return reshape(tp, hm, {B, cfg_.J, cfg_.heat(), cfg_.heat()});
}

Var MotionTokenizer::decode_joints(Tape& tp, Var motion_values) const {
    return decode_tokens(tp, from_code_(tp, motion_values));
}

int MotionTokenizer::reseed_dead_codes(const Tensor& pre_quant_batch, Rng& rng) {
    int C = cfg_.C_m;
    if (pre_quant_batch.numel() < C)
        throw std::invalid_argument("reseed_dead_codes: batch too small");
    int64_t n = pre_quant_batch.numel() / C;
    float* cb = codebook_->val.ptr();
    int replaced = 0;
    for (int k = 0; k < cfg_.K; ++k) {
        if (usage_[(size_t)k] != 0) continue;
        int64_t pick = (int64_t)rng.uniform_int(0, (int)(n - 1));
        std::copy(pre_quant_batch.ptr() + pick * C, pre_quant_batch.ptr() + (pick + 1) * C,
                  cb + (int64_t)k * C);
        ++replaced;
    }
    reset_usage();
    return replaced;
}

Var heatmap_mse(Tape& tp, Var pred, Var gt) { return mse(tp, pred, gt); }

}  // namespace imanim::motok
