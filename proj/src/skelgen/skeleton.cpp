#include "imanim/skelgen/skelgen.hpp"

#include <cmath>
#include <stdexcept>

namespace imanim::skelgen {

namespace {
constexpr float kPi = 3.14159265358979323846f;
constexpr float kTwoPi = 6.28318530717958647692f;

// salts for independent per-identity / per-motion substreams
enum : uint64_t {
    kSaltLimbs = 0xA1,
    kSaltScale = 0xB1,
    kSaltPalette = 0xC1,
    kSaltAnchor = 0xD1,
};
}  // namespace

const SkeletonTopology& SkeletonTopology::standard() {
    static const SkeletonTopology topo = [] {
        SkeletonTopology t;
        t.J = 14;
        //            0   1   2   3   4   5   6   7   8   9  10  11  12  13
        //          root chs hd  eyL eyR mth luA lfA ruA rfA lth lsh rth rsh
        t.parent = {-1,  0,  1,  2,  2,  2,  1,  6,  1,  8,  0, 10,  0, 12};
        t.rest_angle.assign(14, 0.0f);
        t.base_len.assign(14, 0.0f);
        t.is_face.assign(14, 0);
        auto set = [&](int j, float world_angle, float len) {
            t.rest_angle[j] = world_angle;  // world angle; made relative below
            t.base_len[j] = len;
        };
        // desired world angles at rest (+y is down)
        set(1, -kPi / 2, 0.12f);           // chest: straight up
        set(2, -kPi / 2, 0.07f);           // head
        set(3, -kPi / 2 - 0.55f, 0.025f);  // left eye, up-left
        set(4, -kPi / 2 + 0.55f, 0.025f);  // right eye, up-right
        set(5, kPi / 2, 0.035f);           // mouth, below head joint
        set(6, kPi / 2 + 0.75f, 0.11f);    // left upper arm, down-left
        set(7, kPi / 2 + 0.55f, 0.10f);    // left forearm
        set(8, kPi / 2 - 0.75f, 0.11f);    // right upper arm, down-right
        set(9, kPi / 2 - 0.55f, 0.10f);    // right forearm
        set(10, kPi / 2 + 0.28f, 0.12f);   // left thigh
        set(11, kPi / 2 + 0.18f, 0.11f);   // left shin
        set(12, kPi / 2 - 0.28f, 0.12f);   // right thigh
        set(13, kPi / 2 - 0.18f, 0.11f);   // right shin
        // world -> relative (parents appear before children in index order)
        std::vector<float> world = t.rest_angle;
        for (int j = 1; j < t.J; ++j) {
            int p = t.parent[j];
            t.rest_angle[j] = world[j] - (p == 0 ? 0.0f : world[p]);
        }
        t.is_face[3] = t.is_face[4] = t.is_face[5] = 1;
        return t;
    }();
    return topo;
}

Identity make_identity(uint64_t seed, int scale_class) {
    if (scale_class < 0 || scale_class > 3)
        throw std::invalid_argument("make_identity: scale_class must be in {0..3}");
    const auto& topo = SkeletonTopology::standard();
    Identity id;
    id.seed = seed;
    id.scale_class = scale_class;

    // proportions from the seed only: shared across the classes of a pair
    Rng limb_rng(Rng::derive(seed, kSaltLimbs));
    id.limb_lengths.assign(topo.J, 0.0f);
    for (int j = 1; j < topo.J; ++j) {
        if (topo.is_face[j]) {
            id.limb_lengths[j] = topo.base_len[j];  // fixed: expression geometry
        } else {
            id.limb_lengths[j] = topo.base_len[j] * limb_rng.uniform(0.9f, 1.1f);
        }
    }

    Rng scale_rng(Rng::derive(seed, kSaltScale + (uint64_t)scale_class));
    float lo = 0.4f + 0.3f * (float)scale_class;
    id.global_scale = scale_rng.uniform(lo, lo + 0.3f);

    Rng pal_rng(Rng::derive(seed, kSaltPalette + (uint64_t)scale_class));
    id.palette.assign(topo.J, {0.0f, 0.0f, 0.0f});
    for (int j = 1; j < topo.J; ++j) {
        float h = pal_rng.uniform(0.0f, 1.0f);
        float s = pal_rng.uniform(0.6f, 1.0f);
        float v = pal_rng.uniform(0.45f, 0.9f);
        // hsv -> rgb
        float hh = h * 6.0f;
        int sector = (int)hh % 6;
        float f = hh - std::floor(hh);
        float p = v * (1 - s), q = v * (1 - s * f), u = v * (1 - s * (1 - f));
        float r, g, b;
        switch (sector) {
            case 0: r = v; g = u; b = p; break;
            case 1: r = q; g = v; b = p; break;
            case 2: r = p; g = v; b = u; break;
            case 3: r = p; g = q; b = v; break;
            case 4: r = u; g = p; b = v; break;
            default: r = v; g = p; b = q; break;
        }
        id.palette[j] = {r, g, b};
    }

    Rng anchor_rng(Rng::derive(seed, kSaltAnchor + (uint64_t)scale_class));
    id.root_anchor = {anchor_rng.uniform(0.47f, 0.53f), anchor_rng.uniform(0.47f, 0.53f)};
    return id;
}

MotionSequence make_motion(uint64_t seed, int T) {
    if (T < 2) throw std::invalid_argument("make_motion: T must be >= 2");
    const auto& topo = SkeletonTopology::standard();
    MotionSequence m;
    m.seed = seed;
    m.T = T;
    m.angles = Tensor({T, topo.J});
    m.root_translation = Tensor({T, 2});
    Rng rng(Rng::derive(seed, 0xE1));
    // whole-body orientation: uniform so the root-bone angle covers all sectors
    float psi = rng.uniform(0.0f, kTwoPi);
    for (int j = 1; j < topo.J; ++j) {
        float amp, base = topo.rest_angle[j];
        if (topo.is_face[j])
            amp = rng.uniform(0.02f, 0.10f);
        else if (j == 1)
            // whole-body sway: large enough that the orientation at any one
            // frame does not pin down the orientation at another
            amp = rng.uniform(0.25f, 0.80f);
        else
            amp = rng.uniform(0.15f, 0.55f);
        float freq = rng.uniform(0.5f, 2.0f);
        float phase = rng.uniform(0.0f, kTwoPi);
        float orient = (j == 1) ? psi : 0.0f;
        for (int t = 0; t < T; ++t) {
            float s = std::sin(kTwoPi * freq * (float)t / (float)T + phase);
            m.angles.at(t, j) = base + orient + amp * s;
        }
    }
    for (int axis = 0; axis < 2; ++axis) {
        float amp = rng.uniform(0.0f, 0.04f);
        float freq = rng.uniform(0.5f, 1.5f);
        float phase = rng.uniform(0.0f, kTwoPi);
        for (int t = 0; t < T; ++t)
            m.root_translation.at(t, axis) =
                amp * std::sin(kTwoPi * freq * (float)t / (float)T + phase);
    }
    return m;
}

std::vector<std::array<double, 2>> pose_skeleton_precise(const Identity& id,
                                                         const MotionSequence& motion,
                                                         int frame) {
    if (frame < 0 || frame >= motion.T)
        throw std::out_of_range("pose_skeleton: frame out of range");
    const auto& topo = SkeletonTopology::standard();
    std::vector<std::array<double, 2>> pos(topo.J);
    std::vector<double> acc(topo.J, 0.0);
    pos[0] = {(double)id.root_anchor[0] + (double)motion.root_translation.at(frame, 0),
              (double)id.root_anchor[1] + (double)motion.root_translation.at(frame, 1)};
    for (int j = 1; j < topo.J; ++j) {
        int p = topo.parent[j];
        acc[j] = (p == 0 ? 0.0 : acc[p]) + (double)motion.angles.at(frame, j);
        double len = (double)id.limb_lengths[j] * (double)id.global_scale;
        pos[j] = {pos[p][0] + len * std::cos(acc[j]), pos[p][1] + len * std::sin(acc[j])};
    }
    return pos;
}

Tensor pose_skeleton(const Identity& id, const MotionSequence& motion, int frame) {
    auto precise = pose_skeleton_precise(id, motion, frame);
    Tensor pos({(int)precise.size(), 2});
    for (size_t j = 0; j < precise.size(); ++j) {
        pos.at((int)j, 0) = (float)precise[j][0];
        pos.at((int)j, 1) = (float)precise[j][1];
    }
    return pos;
}

}  // namespace imanim::skelgen
