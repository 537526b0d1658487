#pragma once

#include "imanim/core/graph.hpp"
#include "imanim/core/rng.hpp"

#include <string>
#include <vector>

namespace imanim::nn {

// Fill with N(0, std^2) samples.
void normal_init(Tensor& t, Rng& rng, float std);

struct Linear {
    Var w, b;
    Linear() = default;
    // w_std < 0 selects 1/sqrt(din)
    Linear(ParamStore& ps, const std::string& prefix, int din, int dout, Rng& rng,
           float w_std = -1.0f);
    Var operator()(Tape& tp, Var x) const { return linear(tp, x, w, b); }
};

struct LayerNorm {
    Var gamma, beta;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& prefix, int d);
    Var operator()(Tape& tp, Var x) const { return layer_norm(tp, x, gamma, beta); }
};

struct SelfAttention {
    Var wqkv, bqkv, wo, bo;
    int heads = 1;
    SelfAttention() = default;
    SelfAttention(ParamStore& ps, const std::string& prefix, int d, int heads, Rng& rng);
    Var operator()(Tape& tp, Var x) const {
        return self_attention(tp, x, wqkv, bqkv, wo, bo, heads);
    }
};

// zero_out starts the output projection at zero so the layer is an exact
// no-op inside a residual branch until trained.
struct CrossAttention {
    Var wq, bq, wkv, bkv, wo, bo;
    int heads = 1;
    CrossAttention() = default;
    CrossAttention(ParamStore& ps, const std::string& prefix, int d, int heads, Rng& rng,
                   bool zero_out = false);
    Var operator()(Tape& tp, Var q, Var kv) const {
        return cross_attention(tp, q, kv, wq, bq, wkv, bkv, wo, bo, heads);
    }
};

struct Mlp {
    Linear fc1, fc2;
    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& prefix, int d, int ff_ratio, Rng& rng);
    Var operator()(Tape& tp, Var x) const;
};

// Pre-norm residual transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
struct Block {
    LayerNorm ln1, ln2;
    SelfAttention attn;
    Mlp mlp;
    Block() = default;
    Block(ParamStore& ps, const std::string& prefix, int d, int heads, int ff_ratio, Rng& rng);
    Var operator()(Tape& tp, Var x) const;
};

struct TransformerStack {
    std::vector<Block> blocks;
    TransformerStack() = default;
    TransformerStack(ParamStore& ps, const std::string& prefix, int depth, int d, int heads,
                     int ff_ratio, Rng& rng);
    Var operator()(Tape& tp, Var x) const;
};

}  // namespace imanim::nn
