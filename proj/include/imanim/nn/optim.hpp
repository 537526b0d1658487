#pragma once

#include "imanim/core/graph.hpp"

#include <map>
#include <string>
#include <vector>

namespace imanim::nn {

// Decoupled-weight-decay Adam with per-group learning rates. Weight decay
// applies only to matrix-shaped parameters (biases and norm scales are
// exempt). Moment state is keyed by parameter name so it survives a
// save/load round trip.
struct AdamW {
    struct Group {
        std::vector<Var> params;
        float lr = 1e-4f;
    };
    struct Slot {
        Tensor m, v;
    };

    std::vector<Group> groups;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
    int64_t step_count = 0;
    std::map<std::string, Slot> state;

    void add_group(std::vector<Var> params, float lr);
    // L2 norm over every gradient in every group (missing grads count as 0).
    double global_grad_norm() const;
    // Scales all gradients so the global norm is at most max_norm.
    void clip_grad_norm(float max_norm);
    void step();
    void zero_grads();
};

}  // namespace imanim::nn
