#pragma once

#include "imanim/core/tensor.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace imanim {

// Reverse-mode autodiff over Tensor values. A Tape records computation
// nodes in creation order; backward() sweeps them in reverse. Parameters
// are leaf nodes that live outside the tape and persist across steps.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool is_param = false;
    std::string name;  // params only
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.empty() && !val.empty()) grad = Tensor(val.shape);
        return grad;
    }
    bool has_grad() const { return !grad.empty(); }
};

Var make_param(const std::string& name, Tensor init);
Var make_input(Tensor val);

class Tape {
public:
    Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bwd);
    // Seeds d(loss)=1 and sweeps the tape in reverse creation order.
    void backward(const Var& loss);
    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

private:
    std::vector<Var> nodes_;
};

// ---- ops ------------------------------------------------------------

// y = x . w + b, x: (..., din), w: (din, dout), b: (dout) or nullptr
Var linear(Tape& tp, Var x, Var w, Var b);

Var add(Tape& tp, Var a, Var b);             // same shape
Var sub(Tape& tp, Var a, Var b);             // same shape
Var scale(Tape& tp, Var x, float s);
Var add_scaled(Tape& tp, Var a, float sa, Var b, float sb);  // sa*a + sb*b

// x: (B, L, D) plus table rows selected per token position (shared over batch)
Var add_rows_pattern(Tape& tp, Var x, Var table, std::vector<int> row_idx);
// x: (B, L, D) plus one vector per batch element, broadcast over tokens
Var add_per_batch_vec(Tape& tp, Var x, Var v);
// tile one learnable vector (D) into (B, L, D)
Var expand_token(Tape& tp, Var v, int batch, int len);

Var layer_norm(Tape& tp, Var x, Var gamma, Var beta);
Var gelu(Tape& tp, Var x);
Var sigmoid(Tape& tp, Var x);

Var concat_tokens(Tape& tp, const std::vector<Var>& xs);     // along dim 1 of (B, L, D)
Var slice_tokens(Tape& tp, Var x, int off, int len);
Var reshape(Tape& tp, Var x, std::vector<int> s);

Var self_attention(Tape& tp, Var x, Var wqkv, Var bqkv, Var wo, Var bo, int heads);
Var cross_attention(Tape& tp, Var q_in, Var kv_in, Var wq, Var bq, Var wkv, Var bkv,
                    Var wo, Var bo, int heads);

Var mse(Tape& tp, Var a, Var b);             // scalar node (shape {1})

Var gather_rows(Tape& tp, Var table, std::vector<int> idx);
Var detach(Tape& tp, Var x);
Var straight_through(Tape& tp, Var z, Tensor quantized);

// x: (B, C, H, W); kernel conv2d: (Co, Ci, kh, kw), conv_transpose2d: (Ci, Co, kh, kw)
Var conv2d(Tape& tp, Var x, Var k, Var b, int stride, int pad);
Var conv_transpose2d(Tape& tp, Var x, Var k, Var b, int stride, int pad);

// x: (B, P, D), a: (Q, P) -> (B, Q, D); learned resampling over the token axis
Var token_resample(Tape& tp, Var x, Var a);

// (B, H, W, C) <-> (B, (H/p)*(W/p), p*p*C), row-major grid, block layout (py, px, c)
Var patchify(Tape& tp, Var img, int p);
Var unpatchify(Tape& tp, Var tok, int p, int h, int w, int c);

// (N, H, W, C) -> (N, 2H, 2W, C)
Var nearest_upsample_2x(Tape& tp, Var x);

// ---- parameter store -------------------------------------------------

struct ParamStore {
    std::vector<Var> list;  // creation order
    std::map<std::string, Var> by_name;

    Var add(const std::string& name, Tensor init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const { return by_name.count(name) > 0; }
    void zero_grads();
    int64_t total_params() const;
};

// Zero the weight rows for the given input channels (and nothing else),
// so appended condition inputs start as exact no-ops.
void zero_init_rows(Var w, const std::vector<int>& rows);
void zero_fill(Var v);

}  // namespace imanim
