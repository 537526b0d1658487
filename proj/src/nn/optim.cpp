#include "imanim/nn/optim.hpp"

#include <cmath>
#include <cstring>

namespace imanim::nn {

void AdamW::add_group(std::vector<Var> params, float lr) {
    Group g;
    g.params = std::move(params);
    g.lr = lr;
    groups.push_back(std::move(g));
}

double AdamW::global_grad_norm() const {
    double acc = 0.0;
    for (const auto& g : groups)
        for (const auto& p : g.params) {
            if (!p->has_grad()) continue;
            const float* gp = p->grad.ptr();
            for (int64_t i = 0; i < p->grad.numel(); ++i) acc += (double)gp[i] * gp[i];
        }
    return std::sqrt(acc);
}

void AdamW::clip_grad_norm(float max_norm) {
    double norm = global_grad_norm();
    if (norm <= (double)max_norm || norm == 0.0) return;
    float s = (float)((double)max_norm / norm);
    for (auto& g : groups)
        for (auto& p : g.params) {
            if (!p->has_grad()) continue;
            float* gp = p->grad.ptr();
            for (int64_t i = 0; i < p->grad.numel(); ++i) gp[i] *= s;
        }
}

void AdamW::step() {
    ++step_count;
    float bc1 = 1.0f - std::pow(beta1, (float)step_count);
    float bc2 = 1.0f - std::pow(beta2, (float)step_count);
    for (auto& g : groups)
        for (auto& p : g.params) {
            auto& slot = state[p->name];
            if (slot.m.empty()) {
                slot.m = Tensor(p->val.shape);
                slot.v = Tensor(p->val.shape);
            }
            const float* gp = p->has_grad() ? p->grad.ptr() : nullptr;
            float* mp = slot.m.ptr();
            float* vp = slot.v.ptr();
            float* w = p->val.ptr();
            bool decay = p->val.ndim() >= 2;
            float wd = decay ? weight_decay : 0.0f;
            int64_t n = p->val.numel();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) {
                float gi = gp ? gp[i] : 0.0f;
                mp[i] = beta1 * mp[i] + (1.0f - beta1) * gi;
                vp[i] = beta2 * vp[i] + (1.0f - beta2) * gi * gi;
                float mhat = mp[i] / bc1;
                float vhat = vp[i] / bc2;
                w[i] -= g.lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
            }
        }
}

void AdamW::zero_grads() {
    for (auto& g : groups)
        for (auto& p : g.params)
            if (p->has_grad()) std::memset(p->grad.ptr(), 0, sizeof(float) * p->grad.numel());
}

}  // namespace imanim::nn
