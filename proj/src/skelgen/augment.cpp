#include "imanim/skelgen/skelgen.hpp"

#include <algorithm>
#include <cmath>

namespace imanim::skelgen {

namespace {

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    float d = mx - mn;
    s = mx > 0.0f ? d / mx : 0.0f;
    if (d <= 0.0f) {
        h = 0.0f;
        return;
    }
    if (mx == r)
        h = (g - b) / d + (g < b ? 6.0f : 0.0f);
    else if (mx == g)
        h = (b - r) / d + 2.0f;
    else
        h = (r - g) / d + 4.0f;
    h /= 6.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    float hh = (h - std::floor(h)) * 6.0f;
    int sector = (int)hh % 6;
    float f = hh - std::floor(hh);
    float p = v * (1 - s), q = v * (1 - s * f), u = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: r = v; g = u; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = u; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = u; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

// bilinear sample with white outside the canvas
void sample_bilinear(const Tensor& frames, int t, float xs, float ys, float* rgb) {
    int H = frames.shape[1], W = frames.shape[2];
    float u = xs - 0.5f, v = ys - 0.5f;
    int x0 = (int)std::floor(u), y0 = (int)std::floor(v);
    float fx = u - x0, fy = v - y0;
    for (int c = 0; c < 3; ++c) rgb[c] = 0.0f;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            int x = x0 + dx, y = y0 + dy;
            float wgt = (dx ? fx : 1.0f - fx) * (dy ? fy : 1.0f - fy);
            if (wgt == 0.0f) continue;
            if (x < 0 || x >= W || y < 0 || y >= H) {
                for (int c = 0; c < 3; ++c) rgb[c] += wgt;  // white border
            } else {
                for (int c = 0; c < 3; ++c) rgb[c] += wgt * frames.at(t, y, x, c);
            }
        }
}

}  // namespace

Clip augment_with(const Clip& clip, const AugParams& p) {
    int T = clip.frames.shape[0], H = clip.frames.shape[1], W = clip.frames.shape[2];
    Clip out = clip;
    out.aug.applied = true;
    out.aug.hue_shift = p.hue_shift;
    out.aug.value_shift = p.value_shift;

    // geometric map: crop rect (fractions) -> pad border -> resize to W,H.
    float X0 = p.crop_x0 * (float)W, Y0 = p.crop_y0 * (float)H;
    float CW = p.crop_w * (float)W, CH = p.crop_h * (float)H;
    float k = 1.0f / (1.0f + 2.0f * p.pad);
    float sx = (float)W * k / CW;
    float sy = (float)H * k / CH;
    float ox = (float)W * p.pad * k - X0 * sx;
    float oy = (float)H * p.pad * k - Y0 * sy;
    bool geo_identity = sx == 1.0f && sy == 1.0f && ox == 0.0f && oy == 0.0f;
    out.aug.sx = sx;
    out.aug.sy = sy;
    out.aug.ox = ox;
    out.aug.oy = oy;

    if (!geo_identity) {
        out.frames = Tensor({T, H, W, 3});
        for (int t = 0; t < T; ++t)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    float xs = ((float)x + 0.5f - ox) / sx;
                    float ys = ((float)y + 0.5f - oy) / sy;
                    sample_bilinear(clip.frames, t, xs, ys, &out.frames.at(t, y, x, 0));
                }
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < clip.joints.shape[1]; ++j) {
                out.joints.at(t, j, 0) = clip.joints.at(t, j, 0) * sx + ox;
                out.joints.at(t, j, 1) = clip.joints.at(t, j, 1) * sy + oy;
            }
        for (int t = 0; t < T && !out.joints_clipped; ++t)
            for (int j = 0; j < clip.joints.shape[1]; ++j) {
                float x = out.joints.at(t, j, 0), y = out.joints.at(t, j, 1);
                if (x < 0.0f || x >= (float)W || y < 0.0f || y >= (float)H) {
                    out.joints_clipped = true;
                    break;
                }
            }
    }

    if (p.hue_shift != 0.0f || p.value_shift != 0.0f) {
        float* px = out.frames.ptr();
        int64_t n = out.frames.numel() / 3;
        for (int64_t i = 0; i < n; ++i) {
            float h, s, v;
            rgb_to_hsv(px[3 * i], px[3 * i + 1], px[3 * i + 2], h, s, v);
            h += p.hue_shift;
            v = std::clamp(v + p.value_shift, 0.0f, 1.0f);
            hsv_to_rgb(h, s, v, px[3 * i], px[3 * i + 1], px[3 * i + 2]);
        }
    }
    return out;
}

Clip augment(const Clip& clip, uint64_t aug_seed) {
    int T = clip.frames.shape[0], H = clip.frames.shape[1], W = clip.frames.shape[2];
    int J = clip.joints.shape[1];
    Rng rng(Rng::derive(aug_seed, 0xF1));
    AugParams p;
    p.hue_shift = rng.uniform(-0.2f, 0.2f);
    p.value_shift = rng.uniform(-0.2f, 0.2f);

    // a crop is usable if every frame keeps at least 4 joints
    auto crop_ok = [&](const AugParams& q) {
        float x0 = q.crop_x0 * (float)W, y0 = q.crop_y0 * (float)H;
        float x1 = x0 + q.crop_w * (float)W, y1 = y0 + q.crop_h * (float)H;
        for (int t = 0; t < T; ++t) {
            int inside = 0;
            for (int j = 0; j < J; ++j) {
                float x = clip.joints.at(t, j, 0), y = clip.joints.at(t, j, 1);
                if (x >= x0 && x < x1 && y >= y0 && y < y1) ++inside;
            }
            if (inside < 4) return false;
        }
        return true;
    };

    bool found = false;
    for (int attempt = 0; attempt < 10 && !found; ++attempt) {
        float side = std::sqrt(rng.uniform(0.6f, 1.0f));
        AugParams q = p;
        q.crop_w = q.crop_h = side;
        q.crop_x0 = rng.uniform(0.0f, 1.0f - side);
        q.crop_y0 = rng.uniform(0.0f, 1.0f - side);
        q.pad = rng.uniform(0.0f, 0.2f);
        if (crop_ok(q)) {
            p = q;
            found = true;
        }
    }
    Clip out = augment_with(clip, p);
    if (!found) out.aug.fallback_identity = true;
    return out;
}

}  // namespace imanim::skelgen
