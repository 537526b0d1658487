#include "imanim/nn/layers.hpp"

#include <cmath>

namespace imanim::nn {

void normal_init(Tensor& t, Rng& rng, float std) {
    for (auto& v : t.data) v = (float)(rng.normal() * std);
}

Linear::Linear(ParamStore& ps, const std::string& prefix, int din, int dout, Rng& rng,
               float w_std) {
    if (w_std < 0.0f) w_std = 1.0f / std::sqrt((float)din);
    Tensor wt({din, dout});
    normal_init(wt, rng, w_std);
    w = ps.add(prefix + ".w", std::move(wt));
    b = ps.add(prefix + ".b", Tensor({dout}));
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& prefix, int d) {
    gamma = ps.add(prefix + ".gamma", Tensor({d}, 1.0f));
    beta = ps.add(prefix + ".beta", Tensor({d}));
}

SelfAttention::SelfAttention(ParamStore& ps, const std::string& prefix, int d, int heads_,
                             Rng& rng)
    : heads(heads_) {
    float std = 1.0f / std::sqrt((float)d);
    Tensor wq({d, 3 * d});
    normal_init(wq, rng, std);
    wqkv = ps.add(prefix + ".wqkv", std::move(wq));
    bqkv = ps.add(prefix + ".bqkv", Tensor({3 * d}));
    Tensor wot({d, d});
    normal_init(wot, rng, std);
    wo = ps.add(prefix + ".wo", std::move(wot));
    bo = ps.add(prefix + ".bo", Tensor({d}));
}

CrossAttention::CrossAttention(ParamStore& ps, const std::string& prefix, int d, int heads_,
                               Rng& rng, bool zero_out)
    : heads(heads_) {
    float std = 1.0f / std::sqrt((float)d);
    Tensor wqt({d, d});
    normal_init(wqt, rng, std);
    wq = ps.add(prefix + ".wq", std::move(wqt));
    bq = ps.add(prefix + ".bq", Tensor({d}));
    Tensor wkvt({d, 2 * d});
    normal_init(wkvt, rng, std);
    wkv = ps.add(prefix + ".wkv", std::move(wkvt));
    bkv = ps.add(prefix + ".bkv", Tensor({2 * d}));
    Tensor wot({d, d});
    if (!zero_out) normal_init(wot, rng, std);
    wo = ps.add(prefix + ".wo", std::move(wot));
    bo = ps.add(prefix + ".bo", Tensor({d}));
}

Mlp::Mlp(ParamStore& ps, const std::string& prefix, int d, int ff_ratio, Rng& rng)
    : fc1(ps, prefix + ".fc1", d, ff_ratio * d, rng),
      fc2(ps, prefix + ".fc2", ff_ratio * d, d, rng) {}

Var Mlp::operator()(Tape& tp, Var x) const { return fc2(tp, gelu(tp, fc1(tp, x))); }

Block::Block(ParamStore& ps, const std::string& prefix, int d, int heads, int ff_ratio, Rng& rng)
    : ln1(ps, prefix + ".ln1", d),
      ln2(ps, prefix + ".ln2", d),
      attn(ps, prefix + ".attn", d, heads, rng),
      mlp(ps, prefix + ".mlp", d, ff_ratio, rng) {}

Var Block::operator()(Tape& tp, Var x) const {
    x = add(tp, x, attn(tp, ln1(tp, x)));
    x = add(tp, x, mlp(tp, ln2(tp, x)));
    return x;
}

TransformerStack::TransformerStack(ParamStore& ps, const std::string& prefix, int depth, int d,
                                   int heads, int ff_ratio, Rng& rng) {
    for (int i = 0; i < depth; ++i)
        blocks.emplace_back(ps, prefix + ".blk" + std::to_string(i), d, heads, ff_ratio, rng);
}

Var TransformerStack::operator()(Tape& tp, Var x) const {
    for (const auto& b : blocks) x = b(tp, x);
    return x;
}

}  // namespace imanim::nn
