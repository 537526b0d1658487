#pragma once

#include "imanim/core/graph.hpp"
#include "imanim/core/rng.hpp"
#include "imanim/nn/layers.hpp"

#include <functional>
#include <vector>

namespace imanim::vidgen {

// Training objective for the denoiser: rectified-flow velocity matching
// (default) or discrete-schedule noise prediction, selectable per run.
enum class Objective { kFlow, kEpsilon };

struct DiTConfig {
    int H = 64, W = 64;
    int f = 4;        // codec stride: the latent grid is H/f per side
    int p_l = 2;      // latent patch size (1, 2 or 4)
    int D = 128, heads = 4, ff_ratio = 4;
    int blocks = 8;   // transformer depth
    int k = 2;        // one expression adapter after every k blocks
    int E = 4;        // expression tokens per frame
    int D_ret = 128;  // channel width of the incoming retargeted grid
    int T_max = 8;
    int S = 20;       // default sampler step count
    Objective mode = Objective::kFlow;
    int ddpm_steps = 1000;  // discrete-schedule table length

    int c_l() const { return f * f * 3; }
    int lat_grid() const { return H / f; }
    int tok_grid() const { return H / (f * p_l); }
    int P() const { return tok_grid() * tok_grid(); }  // tokens per frame
};

// cumulative signal levels for the discrete schedule: linear beta ramp
// 1e-4 .. 2e-2, alpha_bar[i] = prod_{j<=i} (1 - beta_j); strictly decreasing
std::vector<double> make_alpha_bar(int steps);

// per-frame expression signal: the listed face joints relative to the head
// joint, divided by the identity's pixel scale -> (T, len(face), 2). The
// division cancels body size, so paired identities driven by the same motion
// produce matching offsets.
Tensor expression_offsets(const Tensor& joints, int head, const std::vector<int>& face,
                          float scale_px);

// denoiser objective given the model output:
//   flow    -> mean squared error against the velocity target (eps - x0)
//   epsilon -> mean squared error against the injected noise
Var objective_loss(Tape& tp, Var pred, const Tensor& x0, const Tensor& eps, Objective mode);

// S-step reverse-time integrator from pure noise. `predict` maps the current
// state and normalized time to the model output (velocity for flow, noise
// estimate for epsilon). Flow: Euler from t=1 down to t=0. Epsilon:
// deterministic coarse stepping along the schedule with a final jump to the
// clean point.
Tensor integrate(const std::function<Tensor(const Tensor&, float)>& predict,
                 const Tensor& eps_init, int S, Objective mode, int ddpm_steps = 1000);

// Small video transformer over all T*P patch tokens jointly, conditioned on
// the retargeted grid (channel-stacked, zero-initialized embedding region so
// the condition is invisible at step 0) and per-frame expression tokens
// (frame-local cross-attention adapters with zero-initialized output
// projections and residual skips).
class VideoGenerator {
public:
    VideoGenerator(ParamStore& ps, const DiTConfig& cfg, Rng& rng);

    // (T, 3, 2) expression offsets -> (T, E, D) tokens via a two-layer MLP
    Var expression_encode(Tape& tp, const Tensor& offsets) const;

    // channel-stack the projected retargeted grid onto the noisy latent and
    // patch-embed: noisy (T, g, g, c_l) + ret (T, tg, tg, D_ret) -> (1, T*P, D)
    Var build_condition(Tape& tp, Var noisy, Var ret) const;

    // full predictor -> (T, g, g, c_l); pass an empty expr Var to run the
    // plain backbone without adapters
    Var forward(Tape& tp, Var noisy, Var ret, Var expr, float t) const;

    // loss at one time point with caller-fixed noise
    Var training_loss(Tape& tp, const Tensor& x0, Var ret, Var expr, float t,
                      const Tensor& eps) const;

    // run the sampler: ret (T, tg, tg, D_ret) -> latent video (T, g, g, c_l)
    Tensor sample(const Tensor& ret, const Tensor* expr_offsets, int S, Rng& noise_rng) const;

    const DiTConfig& config() const { return cfg_; }

private:
    DiTConfig cfg_;
    std::vector<double> alpha_bar_;
    nn::Linear cond_proj_;    // D_ret -> c_l
    nn::Linear patch_embed_;  // p_l^2 * 2*c_l -> D, condition rows zeroed
    Var frame_emb_;           // (T_max, D)
    Var spatial_emb_;         // (P, D)
    Var null_text_;           // (1, D) learned stand-in for the text input
    nn::Linear time_fc1_, time_fc2_;
    nn::Linear expr_fc1_, expr_fc2_;
    std::vector<nn::Block> blocks_;
    struct Adapter {
        nn::LayerNorm ln;
        nn::CrossAttention attn;  // hidden tokens query the expression tokens
    };
    std::vector<Adapter> adapters_;
    nn::LayerNorm head_ln_;
    nn::Linear head_;  // D -> p_l^2 * c_l

    Var time_embedding(Tape& tp, float t) const;
};

// end-to-end objective: denoiser loss plus weighted retargeting supervision
inline Var stage3_total_loss(Tape& tp, Var dit_loss, Var retarget_loss, float alpha = 10.0f) {
    return add_scaled(tp, dit_loss, 1.0f, retarget_loss, alpha);
}

}  // namespace imanim::vidgen
