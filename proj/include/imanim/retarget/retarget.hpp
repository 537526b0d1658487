#pragma once

#include "imanim/core/graph.hpp"
#include "imanim/core/rng.hpp"
#include "imanim/motok/motok.hpp"
#include "imanim/nn/layers.hpp"

#include <vector>

namespace imanim::retarget {

// Fixed orthonormal 4x4 block-DCT analysis/synthesis transform between
// frames and latents. Lossless up to float rounding, no learned parameters;
// a plain white frame maps to an all-zero latent.
struct LatentCodec {
    int f = 4;

    int c_l() const { return f * f * 3; }
    // (T, H, W, 3) -> (T, H/f, W/f, f*f*3)
    Tensor encode(const Tensor& frames) const;
    // inverse of encode; output NOT clamped
    Tensor decode(const Tensor& latents) const;
};

struct RetargetConfig {
    int H = 64, W = 64;
    int f = 4;    // codec stride
    int p_l = 2;  // latent patch size
    int D = 128, heads = 4, ff_ratio = 4, depth = 4;
    int N_m = 32, C_m = 64;
    int T_max = 8;  // capacity of the frame-index embedding table
    // Baseline variant: drop the mask tokens and instead run plain
    // self-attention over [motion ⊕ ref], taking the reference-token
    // outputs as the result. Those outputs carry no frame index, so the
    // same grid is replicated across all T frames - the static-motion
    // failure mode this baseline exists to demonstrate.
    bool mask_tokens = true;

    int grid() const { return H / (f * p_l); }  // per-frame token grid side
    int P() const { return grid() * grid(); }   // ref / mask tokens per frame
};

// Fuses a motion-token sequence with reference-frame tokens through a joint
// full-attention pass; only the learnable mask-token outputs leave the
// module, so reference content reaches the output solely via attention.
class Retargeter {
public:
    Retargeter(ParamStore& ps, const RetargetConfig& cfg, Rng& rng);

    // (H, W, 3) frame -> (1, P, D) reference tokens (codec + patch + proj;
    // no attention, so token locality follows codec-block locality)
    Var encode_reference(Tape& tp, const Tensor& ref_frame) const;

    // (T, N_m, C_m) per-frame motion values -> (1, T*N_m, D) motion tokens
    // with frame-index embeddings baked in
    Var assemble_motion_sequence(Tape& tp, Var motion_values) const;

    // joint pass over [motion ⊕ ref ⊕ mask]; returns (T, grid, grid, D)
    Var retarget(Tape& tp, Var motion_seq, Var ref_tokens, int T) const;

    // (T, grid, grid, D) -> (T, J, heat, heat) through the shared joint
    // decoder, entered via a learned token-count resampler
    Var decode_retargeted_joints(Tape& tp, Var ret_latent,
                                 const motok::MotionTokenizer& tok) const;

    const RetargetConfig& config() const { return cfg_; }

private:
    RetargetConfig cfg_;
    LatentCodec codec_;
    nn::Linear ref_proj_;     // p_l*p_l*c_l -> D
    nn::Linear motion_proj_;  // C_m -> D
    Var mask_token_;          // (D)
    Var type_emb_;            // (3, D): motion 0, ref 1, mask 2
    Var frame_emb_;           // (T_max, D)
    Var motion_slot_;         // (N_m, D)
    Var grid_slot_;           // (P, D) shared by ref tokens and mask tokens
    nn::TransformerStack stack_;
    Var adapter_;             // (N_m, P) token-count resampler into the decoder
};

// Same elementwise-mean error as the tokenizer's heatmap loss.
inline Var stage2_loss(Tape& tp, Var pred, Var gt) { return motok::heatmap_mse(tp, pred, gt); }

}  // namespace imanim::retarget
