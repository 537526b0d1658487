#pragma once

#include "imanim/core/rng.hpp"
#include "imanim/core/tensor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace imanim::skelgen {

// Fixed articulated tree. Joint 0 is the root (no bone); every other joint
// owns the bone from its parent. Rest angles are relative to the parent
// bone's direction; angle 0 points along +x, +y points down (image space).
struct SkeletonTopology {
    int J = 14;
    std::vector<int> parent;        // parent[0] == -1
    std::vector<float> rest_angle;  // per joint, radians, relative
    std::vector<float> base_len;    // per joint, canvas fraction
    std::vector<uint8_t> is_face;   // eyes + mouth
    int chest = 1, head = 2, eye_l = 3, eye_r = 4, mouth = 5;

    static const SkeletonTopology& standard();
};

struct Identity {
    std::vector<float> limb_lengths;               // per joint, canvas fraction (pre-scale)
    float global_scale = 1.0f;
    int scale_class = 0;
    std::array<float, 2> root_anchor{0.5f, 0.5f};  // unit canvas
    std::vector<std::array<float, 3>> palette;     // per joint (bone color)
    uint64_t seed = 0;

    bool operator==(const Identity& o) const {
        return limb_lengths == o.limb_lengths && global_scale == o.global_scale &&
               scale_class == o.scale_class && root_anchor == o.root_anchor &&
               palette == o.palette;
    }
};

struct MotionSequence {
    int T = 0;
    Tensor angles;            // (T, J) absolute-relative bone angles (root slot unused)
    Tensor root_translation;  // (T, 2) canvas units
    uint64_t seed = 0;
};

struct RenderConfig {
    int H = 64, W = 64;
    float stroke_halfwidth = 1.1f;  // pixels at global_scale 1
    float face_dot_radius = 1.3f;   // pixels at global_scale 1
};

// Record of the geometric/color transform applied by augment().
struct AugRecord {
    bool applied = false;
    bool fallback_identity = false;  // crop retries exhausted
    float hue_shift = 0.0f, value_shift = 0.0f;
    // joint map: x' = x*sx + ox, y' = y*sy + oy (pixel units)
    float sx = 1.0f, sy = 1.0f, ox = 0.0f, oy = 0.0f;
};

struct Clip {
    Tensor frames;  // (T, H, W, 3) in [0,1]
    Tensor joints;  // (T, J, 2) pixel units
    Identity identity;
    uint64_t motion_seed = 0;
    std::string split;
    std::string id;
    bool joints_clipped = false;  // some joint left the canvas and was clamped
    AugRecord aug;
};

// Two clips with identical angle trajectories, different bodies.
struct PairedClip {
    Clip source, target;
};

// Corpus-level reference to a stored pair (ids within one split).
struct PairRef {
    std::string source_id, target_id;
};

// scale_class c draws global_scale from the c-th quarter of [0.4, 1.6).
// Limb-length multipliers depend on the seed only (not the class), so two
// identities built from one seed share body proportions up to global scale —
// that is what makes a PairedClip's normalized poses agree exactly.
Identity make_identity(uint64_t seed, int scale_class);

// Bakes rest pose, a uniformly random whole-body orientation, and per-bone
// sinusoids into absolute bone-angle trajectories.
MotionSequence make_motion(uint64_t seed, int T);

// Forward kinematics for one frame; returns (J, 2) unit-canvas coordinates.
// The float version is the double-precision one rounded once at the end.
Tensor pose_skeleton(const Identity& id, const MotionSequence& motion, int frame);
std::vector<std::array<double, 2>> pose_skeleton_precise(const Identity& id,
                                                         const MotionSequence& motion,
                                                         int frame);

Clip render_clip(const Identity& id, const MotionSequence& motion, const RenderConfig& cfg);

// Renders the same motion under two bodies. Throws if the identities are equal.
PairedClip build_pair(uint64_t motion_seed, const Identity& a, const Identity& b,
                      const RenderConfig& cfg, int T = 8);

// Gaussian peak-1 heatmaps: value at integer grid point p of channel (t,j)
// is exp(-||p - joints[t,j]*(h/src_h)||^2 / (2 sigma^2)).
Tensor rasterize_heatmaps(const Tensor& joints, int src_h, int src_w, int h, int w, float sigma);

struct AugParams {
    float hue_shift = 0.0f;   // in [0,1) hue turns
    float value_shift = 0.0f; // additive brightness
    float crop_x0 = 0.0f, crop_y0 = 0.0f, crop_w = 1.0f, crop_h = 1.0f;  // fractions
    float pad = 0.0f;         // border fraction of the cropped size
};

// Deterministic augmentation with the documented ranges: hue/brightness
// jitter +-0.2, crop keeping 60-100% of area, pad up to 20%, bilinear
// rescale back. Joints get the same affine map as pixels. Crops that drop
// every joint are resampled (10 tries), then fall back to identity.
Clip augment(const Clip& clip, uint64_t aug_seed);
Clip augment_with(const Clip& clip, const AugParams& p);

struct DatasetConfig {
    std::string root;
    int train_clips = 2000;
    int val_clips = 200;
    int test_clips = 200;
    int train_pairs = 400;
    int T = 8, H = 64, W = 64;
    uint64_t seed = 1234;
    bool force = false;
};

// Writes <root>/<split>/<clip_id>/{meta.json, frame_XXX.png, joints.json},
// <root>/<split>/pairs.json and <root>/manifest.json. Deterministic for a
// fixed config. Throws if the output directory is non-empty without force.
void build_dataset(const DatasetConfig& cfg);

// ---- corpus access -----------------------------------------------------

struct ClipRef {
    std::string id, split;
    uint64_t identity_seed = 0, motion_seed = 0;
    int scale_class = 0;
};

class Corpus {
public:
    explicit Corpus(const std::string& root);
    const std::vector<ClipRef>& clips(const std::string& split) const;
    const std::vector<PairRef>& pairs(const std::string& split) const;
    // Loads frames from PNG (cached as 8-bit in memory) and joints.
    Clip load(const std::string& split, const std::string& id) const;
    const std::string& root() const { return root_; }
    uint64_t manifest_hash() const { return manifest_hash_; }
    int T() const { return T_; }
    int H() const { return H_; }
    int W() const { return W_; }

private:
    struct CachedClip {
        std::vector<uint8_t> pixels;  // (T,H,W,3) interleaved
        Tensor joints;
        uint64_t identity_seed = 0, motion_seed = 0;
        int scale_class = 0, T = 0, H = 0, W = 0;
        bool joints_clipped = false;
    };

    std::string root_;
    uint64_t manifest_hash_ = 0;
    int T_ = 8, H_ = 64, W_ = 64;
    std::vector<ClipRef> train_, val_, test_;
    std::vector<PairRef> train_pairs_, val_pairs_, test_pairs_;
    mutable std::map<std::string, CachedClip> cache_;  // not thread-safe
    const std::vector<ClipRef>& split_ref(const std::string& s) const;
};

}  // namespace imanim::skelgen
