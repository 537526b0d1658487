#include "imanim/vidgen/vidgen.hpp"

#include <cmath>
#include <stdexcept>

namespace imanim::vidgen {

std::vector<double> make_alpha_bar(int steps) {
    if (steps < 2) throw std::invalid_argument("make_alpha_bar: need at least 2 steps");
    std::vector<double> ab((size_t)steps);
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        double beta = 1e-4 + (2e-2 - 1e-4) * (double)i / (double)(steps - 1);
        prod *= 1.0 - beta;
        ab[(size_t)i] = prod;
    }
    return ab;
}

Tensor expression_offsets(const Tensor& joints, int head, const std::vector<int>& face,
                          float scale_px) {
    if (joints.ndim() != 3 || joints.shape[2] != 2)
        throw std::invalid_argument("expression_offsets: expected (T, J, 2) joints");
    if (!(scale_px > 0.0f)) throw std::invalid_argument("expression_offsets: scale must be > 0");
    int T = joints.shape[0], J = joints.shape[1];
    if (head < 0 || head >= J)
        throw std::invalid_argument("expression_offsets: head joint missing");
    for (int fj : face)
        if (fj < 0 || fj >= J)
            throw std::invalid_argument("expression_offsets: face joint missing");
    Tensor out({T, (int)face.size(), 2});
    for (int t = 0; t < T; ++t)
        for (size_t i = 0; i < face.size(); ++i)
            for (int d = 0; d < 2; ++d)
                out.at(t, (int)i, d) =
                    (joints.at(t, face[i], d) - joints.at(t, head, d)) / scale_px;
    return out;
}

Var objective_loss(Tape& tp, Var pred, const Tensor& x0, const Tensor& eps, Objective mode) {
    if (pred->val.shape != x0.shape || eps.shape != x0.shape)
        throw std::invalid_argument("objective_loss: shape mismatch");
    if (mode == Objective::kFlow) {
        Tensor target = eps;
        for (int64_t i = 0; i < target.numel(); ++i) target.data[(size_t)i] -= x0.data[(size_t)i];
        return mse(tp, pred, make_input(std::move(target)));
    }
    return mse(tp, pred, make_input(eps));
}

Tensor integrate(const std::function<Tensor(const Tensor&, float)>& predict,
                 const Tensor& eps_init, int S, Objective mode, int ddpm_steps) {
    if (S < 1) throw std::invalid_argument("integrate: need at least one step");
    Tensor x = eps_init;
    if (mode == Objective::kFlow) {
        float h = 1.0f / (float)S;
        for (int s = S; s >= 1; --s) {
            Tensor v = predict(x, (float)s / (float)S);
            require_shape(v, x.shape, "integrate: predictor output");
            for (int64_t i = 0; i < x.numel(); ++i) x.data[(size_t)i] -= h * v.data[(size_t)i];
        }
        return x;
    }
    const std::vector<double> ab = make_alpha_bar(ddpm_steps);
    auto tau = [&](int j) { return (int)std::lround((double)(ddpm_steps - 1) * j / (double)S); };
    for (int j = S; j >= 1; --j) {
        int cur = tau(j);
        double a_cur = ab[(size_t)cur];
        Tensor ehat = predict(x, (float)cur / (float)(ddpm_steps - 1));
        require_shape(ehat, x.shape, "integrate: predictor output");
        double sq = std::sqrt(a_cur), sq1 = std::sqrt(1.0 - a_cur);
        if (j == 1) {
            // final jump straight to the clean estimate
            for (int64_t i = 0; i < x.numel(); ++i)
                x.data[(size_t)i] =
                    (float)(((double)x.data[(size_t)i] - sq1 * ehat.data[(size_t)i]) / sq);
        } else {
            double a_nxt = ab[(size_t)tau(j - 1)];
            double sqn = std::sqrt(a_nxt), sqn1 = std::sqrt(1.0 - a_nxt);
            for (int64_t i = 0; i < x.numel(); ++i) {
                double x0 = ((double)x.data[(size_t)i] - sq1 * ehat.data[(size_t)i]) / sq;
                x.data[(size_t)i] = (float)(sqn * x0 + sqn1 * ehat.data[(size_t)i]);
            }
        }
    }
    return x;
}

VideoGenerator::VideoGenerator(ParamStore& ps, const DiTConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.p_l != 1 && cfg.p_l != 2 && cfg.p_l != 4)
        throw std::invalid_argument("vidgen: latent patch size must be 1, 2 or 4");
    if (cfg.H % (cfg.f * cfg.p_l) != 0 || cfg.W % (cfg.f * cfg.p_l) != 0)
        throw std::invalid_argument("vidgen: f*p_l must divide the frame");
    if (cfg.H != cfg.W) throw std::invalid_argument("vidgen: square frames only");
    if (cfg.D % cfg.heads != 0) throw std::invalid_argument("vidgen: D % heads != 0");
    if (cfg.D % 2 != 0) throw std::invalid_argument("vidgen: D must be even");
    if (cfg.k < 1 || cfg.blocks % cfg.k != 0)
        throw std::invalid_argument("vidgen: adapter period must divide the block count");
    if (cfg.E < 1 || cfg.T_max < 1 || cfg.S < 1)
        throw std::invalid_argument("vidgen: E, T_max, S must be positive");
    alpha_bar_ = make_alpha_bar(cfg.ddpm_steps);

    int c = cfg.c_l();
    cond_proj_ = nn::Linear(ps, "vidgen.cond_proj", cfg.D_ret, c, rng);
    patch_embed_ = nn::Linear(ps, "vidgen.patch_embed", cfg.p_l * cfg.p_l * 2 * c, cfg.D, rng);
    // the condition half of each patch vector starts with zero weight, so an
    // untrained model ignores the retargeted grid entirely
    std::vector<int> cond_rows;
    for (int cell = 0; cell < cfg.p_l * cfg.p_l; ++cell)
        for (int ch = c; ch < 2 * c; ++ch) cond_rows.push_back(cell * 2 * c + ch);
    zero_init_rows(patch_embed_.w, cond_rows);

    auto emb = [&](const std::string& name, std::vector<int> shape) {
        Tensor t(std::move(shape));
        nn::normal_init(t, rng, 0.02f);
        return ps.add(name, std::move(t));
    };
    frame_emb_ = emb("vidgen.frame", {cfg.T_max, cfg.D});
    spatial_emb_ = emb("vidgen.spatial", {cfg.P(), cfg.D});
    null_text_ = emb("vidgen.null_text", {1, cfg.D});
    time_fc1_ = nn::Linear(ps, "vidgen.time_fc1", cfg.D, cfg.D, rng);
    time_fc2_ = nn::Linear(ps, "vidgen.time_fc2", cfg.D, cfg.D, rng);
    expr_fc1_ = nn::Linear(ps, "vidgen.expr_fc1", 6, cfg.D, rng);
    expr_fc2_ = nn::Linear(ps, "vidgen.expr_fc2", cfg.D, cfg.E * cfg.D, rng);

    for (int i = 0; i < cfg.blocks; ++i)
        blocks_.emplace_back(ps, "vidgen.blk" + std::to_string(i), cfg.D, cfg.heads,
                             cfg.ff_ratio, rng);
    for (int a = 0; a < cfg.blocks / cfg.k; ++a) {
        std::string p = "vidgen.adpt" + std::to_string(a);
        adapters_.push_back({nn::LayerNorm(ps, p + ".ln", cfg.D),
                             nn::CrossAttention(ps, p + ".attn", cfg.D, cfg.heads, rng,
                                                /*zero_out=*/true)});
    }
    head_ln_ = nn::LayerNorm(ps, "vidgen.head_ln", cfg.D);
    head_ = nn::Linear(ps, "vidgen.head", cfg.D, cfg.p_l * cfg.p_l * c, rng);
}

Var VideoGenerator::time_embedding(Tape& tp, float t) const {
    int half = cfg_.D / 2;
    Tensor feats({1, 1, cfg_.D});
    for (int i = 0; i < half; ++i) {
        double w = std::exp(-std::log(10000.0) * (double)i / (double)half);
        double arg = 1000.0 * (double)t * w;
        feats.at(0, 0, i) = (float)std::sin(arg);
        feats.at(0, 0, half + i) = (float)std::cos(arg);
    }
    Var h = time_fc1_(tp, make_input(std::move(feats)));
    h = time_fc2_(tp, gelu(tp, h));
    return reshape(tp, h, {1, cfg_.D});
}

Var VideoGenerator::expression_encode(Tape& tp, const Tensor& offsets) const {
    if (offsets.ndim() != 3 || offsets.shape[1] != 3 || offsets.shape[2] != 2)
        throw std::invalid_argument("expression_encode: expected (T, 3, 2) offsets");
    int T = offsets.shape[0];
    Var h = make_input(offsets.reshaped({T, 1, 6}));
    h = expr_fc1_(tp, h);
    h = expr_fc2_(tp, gelu(tp, h));  // (T, 1, E*D)
    return reshape(tp, h, {T, cfg_.E, cfg_.D});
}

Var VideoGenerator::build_condition(Tape& tp, Var noisy, Var ret) const {
    int g = cfg_.lat_grid(), tg = cfg_.tok_grid(), c = cfg_.c_l();
    const auto& ns = noisy->val.shape;
    if (noisy->val.ndim() != 4 || ns[1] != g || ns[2] != g || ns[3] != c)
        throw std::invalid_argument("build_condition: bad noisy latent shape");
    int T = ns[0];
    if (ret->val.shape != std::vector<int>{T, tg, tg, cfg_.D_ret})
        throw std::invalid_argument("build_condition: retargeted grid mismatch");

    Var cond = reshape(tp, ret, {T, cfg_.P(), cfg_.D_ret});
    cond = cond_proj_(tp, cond);  // (T, P, c)
    cond = reshape(tp, cond, {T, tg, tg, c});
    for (int side = tg; side < g; side *= 2) cond = nearest_upsample_2x(tp, cond);

    // channel-stack: pair up each grid cell's latent and condition vectors
    Var nv = reshape(tp, noisy, {T * g * g, 1, c});
    Var cv = reshape(tp, cond, {T * g * g, 1, c});
    Var cat = reshape(tp, concat_tokens(tp, {nv, cv}), {T, g, g, 2 * c});

    Var tok = patchify(tp, cat, cfg_.p_l);  // (T, P, p_l^2 * 2c)
    tok = patch_embed_(tp, tok);            // (T, P, D)
    return reshape(tp, tok, {1, T * cfg_.P(), cfg_.D});
}

Var VideoGenerator::forward(Tape& tp, Var noisy, Var ret, Var expr, float t) const {
    if (!(t >= 0.0f && t <= 1.0f))
        throw std::invalid_argument("forward: time must lie in [0, 1]");
    int T = noisy->val.shape[0];
    if (T < 1 || T > cfg_.T_max) throw std::invalid_argument("forward: frame count out of range");
    if (expr && expr->val.shape != std::vector<int>{T, cfg_.E, cfg_.D})
        throw std::invalid_argument("forward: expression token shape mismatch");

    int P = cfg_.P();
    Var x = build_condition(tp, noisy, ret);  // (1, T*P, D)

    std::vector<int> fidx((size_t)T * P), sidx((size_t)T * P);
    for (int f = 0; f < T; ++f)
        for (int p = 0; p < P; ++p) {
            fidx[(size_t)(f * P + p)] = f;
            sidx[(size_t)(f * P + p)] = p;
        }
    x = add_rows_pattern(tp, x, frame_emb_, fidx);
    x = add_rows_pattern(tp, x, spatial_emb_, sidx);
    x = add_rows_pattern(tp, x, null_text_, std::vector<int>((size_t)T * P, 0));
    x = add_per_batch_vec(tp, x, time_embedding(tp, t));

    for (int i = 0; i < cfg_.blocks; ++i) {
        x = blocks_[(size_t)i](tp, x);
        if ((i + 1) % cfg_.k == 0 && expr) {
            const Adapter& a = adapters_[(size_t)((i + 1) / cfg_.k - 1)];
            // frame-wise: each frame's tokens attend only to that frame's
            // expression tokens, added back through the residual skip
            Var xf = reshape(tp, x, {T, P, cfg_.D});
            Var delta = a.attn(tp, a.ln(tp, xf), expr);
            x = reshape(tp, add(tp, xf, delta), {1, T * P, cfg_.D});
        }
    }

    Var out = head_(tp, head_ln_(tp, x));  // (1, T*P, p_l^2 * c)
    out = reshape(tp, out, {T, P, cfg_.p_l * cfg_.p_l * cfg_.c_l()});
    return unpatchify(tp, out, cfg_.p_l, cfg_.lat_grid(), cfg_.lat_grid(), cfg_.c_l());
}

Var VideoGenerator::training_loss(Tape& tp, const Tensor& x0, Var ret, Var expr, float t,
                                  const Tensor& eps) const {
    int g = cfg_.lat_grid(), c = cfg_.c_l();
    if (x0.ndim() != 4 || x0.shape[1] != g || x0.shape[2] != g || x0.shape[3] != c)
        throw std::invalid_argument("training_loss: bad latent shape");
    if (eps.shape != x0.shape) throw std::invalid_argument("training_loss: noise shape mismatch");
    if (!(t >= 0.0f && t <= 1.0f))
        throw std::invalid_argument("training_loss: time must lie in [0, 1]");

    Tensor xt = x0;
    if (cfg_.mode == Objective::kFlow) {
        for (int64_t i = 0; i < xt.numel(); ++i)
            xt.data[(size_t)i] =
                (1.0f - t) * x0.data[(size_t)i] + t * eps.data[(size_t)i];
    } else {
        int idx = (int)std::lround((double)t * (double)(cfg_.ddpm_steps - 1));
        double a = alpha_bar_[(size_t)idx];
        float sq = (float)std::sqrt(a), sq1 = (float)std::sqrt(1.0 - a);
        for (int64_t i = 0; i < xt.numel(); ++i)
            xt.data[(size_t)i] = sq * x0.data[(size_t)i] + sq1 * eps.data[(size_t)i];
    }
    Var pred = forward(tp, make_input(std::move(xt)), ret, expr, t);
    return objective_loss(tp, pred, x0, eps, cfg_.mode);
}

Tensor VideoGenerator::sample(const Tensor& ret, const Tensor* expr_offsets, int S,
                              Rng& noise_rng) const {
    int tg = cfg_.tok_grid();
    if (ret.ndim() != 4 || ret.shape[1] != tg || ret.shape[2] != tg ||
        ret.shape[3] != cfg_.D_ret)
        throw std::invalid_argument("sample: bad retargeted grid shape");
    int T = ret.shape[0];
    if (T < 1 || T > cfg_.T_max) throw std::invalid_argument("sample: frame count out of range");

    Tensor eps({T, cfg_.lat_grid(), cfg_.lat_grid(), cfg_.c_l()});
    for (auto& v : eps.data) v = noise_rng.normal();

    auto predict = [&](const Tensor& x, float t) {
        Tape tp;
        Var e = expr_offsets ? expression_encode(tp, *expr_offsets) : Var();
        return forward(tp, make_input(x), make_input(ret), e, t)->val;
    };
    return integrate(predict, eps, S, cfg_.mode, cfg_.ddpm_steps);
}

}  // namespace imanim::vidgen
