#include "imanim/skelgen/skelgen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace imanim::skelgen {

namespace {

// coverage in [0,1] from signed distance with a 1px anti-alias ramp
inline float coverage(float dist, float radius) {
    float a = radius + 0.5f - dist;
    return a < 0.0f ? 0.0f : (a > 1.0f ? 1.0f : a);
}

inline float dist_to_segment(float px, float py, float ax, float ay, float bx, float by) {
    float dx = bx - ax, dy = by - ay;
    float len2 = dx * dx + dy * dy;
    float t = len2 > 0.0f ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0f;
    t = std::clamp(t, 0.0f, 1.0f);
    float cx = ax + t * dx - px, cy = ay + t * dy - py;
    return std::sqrt(cx * cx + cy * cy);
}

void blend_prim(Tensor& frame, int t, float x0, float y0, float x1, float y1, float radius,
                const std::array<float, 3>& color, bool is_dot) {
    int H = frame.shape[1], W = frame.shape[2];
    int xmin = std::max(0, (int)std::floor(std::min(x0, x1) - radius - 1.0f));
    int xmax = std::min(W - 1, (int)std::ceil(std::max(x0, x1) + radius + 1.0f));
    int ymin = std::max(0, (int)std::floor(std::min(y0, y1) - radius - 1.0f));
    int ymax = std::min(H - 1, (int)std::ceil(std::max(y0, y1) + radius + 1.0f));
    for (int y = ymin; y <= ymax; ++y)
        for (int x = xmin; x <= xmax; ++x) {
            float cx = x + 0.5f, cy = y + 0.5f;
            float d = is_dot ? std::hypot(cx - x0, cy - y0)
                             : dist_to_segment(cx, cy, x0, y0, x1, y1);
            float a = coverage(d, radius);
            if (a <= 0.0f) continue;
            for (int c = 0; c < 3; ++c) {
                float& px = frame.at(t, y, x, c);
                px = a * color[c] + (1.0f - a) * px;
            }
        }
}

}  // namespace

Clip render_clip(const Identity& id, const MotionSequence& motion, const RenderConfig& cfg) {
    const auto& topo = SkeletonTopology::standard();
    Clip clip;
    clip.identity = id;
    clip.motion_seed = motion.seed;
    clip.frames = Tensor({motion.T, cfg.H, cfg.W, 3}, 1.0f);  // white background
    clip.joints = Tensor({motion.T, topo.J, 2});
    for (int t = 0; t < motion.T; ++t) {
        Tensor pos = pose_skeleton(id, motion, t);
        // joints in pixel units, clamped into the canvas with a flag
        std::vector<std::array<float, 2>> px(topo.J);
        for (int j = 0; j < topo.J; ++j) {
            float x = pos.at(j, 0) * (float)cfg.W;
            float y = pos.at(j, 1) * (float)cfg.H;
            px[j] = {x, y};
            float cx = std::clamp(x, 0.0f, (float)cfg.W - 1e-3f);
            float cy = std::clamp(y, 0.0f, (float)cfg.H - 1e-3f);
            if (cx != x || cy != y) clip.joints_clipped = true;
            clip.joints.at(t, j, 0) = cx;
            clip.joints.at(t, j, 1) = cy;
        }
        // bone strokes (skip face bones), then face dots on top; bones
        // without a palette entry are simply not drawn
        for (int j = 1; j < topo.J; ++j) {
            if (topo.is_face[j] || (size_t)j >= id.palette.size()) continue;
            int p = topo.parent[j];
            blend_prim(clip.frames, t, px[p][0], px[p][1], px[j][0], px[j][1],
                       cfg.stroke_halfwidth, id.palette[j], false);
        }
        for (int j : {topo.eye_l, topo.eye_r, topo.mouth}) {
            if ((size_t)j >= id.palette.size()) continue;
            blend_prim(clip.frames, t, px[j][0], px[j][1], px[j][0], px[j][1],
                       cfg.face_dot_radius, id.palette[j], true);
        }
    }
    return clip;
}

PairedClip build_pair(uint64_t motion_seed, const Identity& a, const Identity& b,
                      const RenderConfig& cfg, int T) {
    if (a == b) throw std::invalid_argument("build_pair: identities must differ");
    MotionSequence motion = make_motion(motion_seed, T);
    return {render_clip(a, motion, cfg), render_clip(b, motion, cfg)};
}

Tensor rasterize_heatmaps(const Tensor& joints, int src_h, int src_w, int h, int w,
                          float sigma) {
    if (sigma <= 0.0f) throw std::invalid_argument("rasterize_heatmaps: sigma must be > 0");
    int T = joints.shape[0], J = joints.shape[1];
    Tensor out({T, J, h, w});
    float sx = (float)w / (float)src_w;
    float sy = (float)h / (float)src_h;
    float inv = 1.0f / (2.0f * sigma * sigma);
#pragma omp parallel for schedule(static)
    for (int64_t tj = 0; tj < (int64_t)T * J; ++tj) {
        int t = (int)(tj / J), j = (int)(tj % J);
        float jx = joints.at(t, j, 0) * sx;
        float jy = joints.at(t, j, 1) * sy;
        float* dst = out.ptr() + tj * h * w;
        for (int gy = 0; gy < h; ++gy)
            for (int gx = 0; gx < w; ++gx) {
                float dx = (float)gx - jx, dy = (float)gy - jy;
                dst[gy * w + gx] = std::exp(-(dx * dx + dy * dy) * inv);
            }
    }
    return out;
}

}  // namespace imanim::skelgen
