#pragma once

#include "imanim/core/graph.hpp"
#include "imanim/core/rng.hpp"
#include "imanim/nn/layers.hpp"

#include <cstdint>
#include <vector>

namespace imanim::motok {

// How frames become motion tokens. kLatentQuery is the main design:
// learned query tokens attend over patch tokens, so nothing forces the
// bottleneck to stay tied to image locations. The other two are
// trainable baselines whose tokens are tied to image space and are
// therefore expected to leak appearance into the motion channel:
//  - kPatchPool: a conv-style encoder built from non-overlapping
//    stride-2 patch-merge stages, pooled down to N_m spatial tokens.
//  - kRawLatent: raw patch content passed through nothing but an
//    averaging pool and one linear width adapter.
enum class EncoderKind { kLatentQuery, kPatchPool, kRawLatent };

struct MotokConfig {
    int H = 64, W = 64, patch = 8;  // input frames and patch size
    int D = 128, heads = 4, ff_ratio = 4;
    int enc_depth = 4, dec_depth = 4;
    int N_m = 32;   // latent tokens per frame
    int C_m = 64;   // code width
    int K = 512;    // codebook rows
    int J = 14;     // joints decoded
    int seed_hw = 8;  // joint-decoder seed grid; two x2 stages upsample to 4x
    EncoderKind encoder = EncoderKind::kLatentQuery;

    int heat() const { return seed_hw * 4; }
    int patches() const { return (H / patch) * (W / patch); }
};

struct QuantizeResult {
    Var values;                // (B, N_m, C_m); forward = codebook rows,
                               // backward passes straight through to pre_quant
    std::vector<int> indices;  // B*N_m codebook rows, row-major
    Var codebook_loss;         // pulls selected codes toward the encoder output
    Var commitment_loss;       // pulls the encoder toward its codes
};

struct CodebookHealth {
    std::vector<int64_t> counts;  // per code
    int64_t total = 0;
    double perplexity = 0.0;  // exp(entropy); K when uniform, 1 when collapsed
    int used = 0;
};

CodebookHealth codebook_health(const std::vector<int>& indices, int K);

// Per-frame tokenizer: frames -> N_m latent vectors -> nearest-code indices,
// plus the joint-query decoder that turns token sets back into heatmaps.
class MotionTokenizer {
public:
    MotionTokenizer(ParamStore& ps, const MotokConfig& cfg, Rng& rng);

    // (B, H, W, 3) in [0,1] -> pre-quantization vectors (B, N_m, C_m)
    Var encode_frames(Tape& tp, const Tensor& frames) const;

    // Nearest codebook row per vector (ties -> lowest index); updates usage
    // counters (single training context).
    QuantizeResult quantize(Tape& tp, Var pre_quant);

    // (B, N_m, C_m) quantized values -> heatmaps (B, J, heat, heat) in (0,1)
    Var decode_joints(Tape& tp, Var motion_values) const;
    // Decoder entry for width-D token sets (token-count adapters feed this).
    Var decode_tokens(Tape& tp, Var tokens) const;  // (B, N_m, D)

    const MotokConfig& config() const { return cfg_; }
    Var codebook() const { return codebook_; }
    const std::vector<int64_t>& usage() const { return usage_; }
    void reset_usage() { usage_.assign((size_t)cfg_.K, 0); }
    // restores counters from a checkpoint (or snapshots around a validation
    // pass, which must not perturb the reseed schedule)
    void set_usage(std::vector<int64_t> u) {
        if ((int)u.size() != cfg_.K)
            throw std::invalid_argument("set_usage: expected K counters");
        usage_ = std::move(u);
    }
    // Replaces codes unused since the last reset with random encoder outputs
    // drawn from the given batch; returns how many codes were replaced.
    int reseed_dead_codes(const Tensor& pre_quant_batch, Rng& rng);

private:
    MotokConfig cfg_;
    // kLatentQuery encoder
    nn::Linear patch_proj_;
    Var latent_tokens_;  // (N_m, D)
    Var enc_pos_;        // (patches + N_m, D) per-slot positions
    Var enc_type_;       // (2, D): patch row 0, latent row 1
    nn::TransformerStack enc_;
    nn::LayerNorm enc_ln_;
    nn::Linear to_code_;  // D -> C_m
    // kPatchPool encoder: stride-2 stages, then a fixed averaging pool
    std::vector<nn::Linear> conv_stages_;
    Tensor conv_pool_;  // (N_m, final_grid^2), constant
    // kRawLatent encoder
    Tensor raw_pool_;      // (N_m, patches), constant
    nn::Linear raw_proj_;  // patch*patch*3 -> C_m

    Var codebook_;  // (K, C_m)
    std::vector<int64_t> usage_;

    nn::Linear from_code_;  // C_m -> D
    Var joint_query_;       // (D), tiled J times
    Var dec_pos_;           // (N_m + J, D)
    Var dec_type_;          // (2, D): motion row 0, query row 1
    nn::TransformerStack dec_;
    nn::LayerNorm dec_ln_;
    Var up1_k_, up1_b_, up2_k_, up2_b_;  // transposed-conv upsampler
};

// Elementwise-mean squared error between equal-shaped heatmap stacks.
Var heatmap_mse(Tape& tp, Var pred, Var gt);

}  // namespace imanim::motok
