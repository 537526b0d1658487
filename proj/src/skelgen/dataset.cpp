#include "imanim/core/image.hpp"
#include "imanim/skelgen/skelgen.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace imanim::skelgen {

namespace {

// seed-space salts per split/role
enum : uint64_t {
    kTrainSingleId = 0x100000,
    kTrainSingleMo = 0x200000,
    kTrainPairId = 0x310000,
    kTrainPairMo = 0x320000,
    kValId = 0x400000,
    kValMo = 0x410000,
    kTestId = 0x500000,
    kTestMo = 0x510000,
};

std::string clip_name(int idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%06d", idx);
    return buf;
}

json identity_json(const Identity& id) {
    json j;
    j["seed"] = id.seed;
    j["scale_class"] = id.scale_class;
    j["global_scale"] = id.global_scale;
    j["root_anchor"] = {id.root_anchor[0], id.root_anchor[1]};
    j["limb_lengths"] = id.limb_lengths;
    json pal = json::array();
    for (const auto& c : id.palette) pal.push_back({c[0], c[1], c[2]});
    j["palette"] = pal;
    return j;
}

void write_clip(const std::string& dir, const Clip& clip, uint64_t identity_seed) {
    fs::create_directories(dir);
    int T = clip.frames.shape[0], H = clip.frames.shape[1], W = clip.frames.shape[2];
    for (int t = 0; t < T; ++t) {
        Tensor frame({H, W, 3});
        std::copy(clip.frames.ptr() + (int64_t)t * H * W * 3,
                  clip.frames.ptr() + (int64_t)(t + 1) * H * W * 3, frame.ptr());
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%03d.png", t);
        save_png(dir + "/" + name, to_u8(frame));
    }
    json jj;
    jj["shape"] = {T, clip.joints.shape[1], 2};
    jj["data"] = clip.joints.data;
    write_file_atomic(dir + "/joints.json", jj.dump());

    json meta;
    meta["format_version"] = 1;
    meta["id"] = clip.id;
    meta["split"] = clip.split;
    meta["identity"] = identity_json(clip.identity);
    meta["identity_seed"] = identity_seed;
    meta["motion_seed"] = clip.motion_seed;
    meta["T"] = T;
    meta["H"] = H;
    meta["W"] = W;
    meta["joints_clipped"] = clip.joints_clipped;
    meta["augmentation"] = nullptr;
    write_file_atomic(dir + "/meta.json", meta.dump(2));
}

struct PlannedClip {
    std::string id, split;
    uint64_t identity_seed, motion_seed;
    int scale_class;
};

}  // namespace

void build_dataset(const DatasetConfig& cfg) {
    fs::path root(cfg.root);
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!cfg.force)
            throw std::invalid_argument("build_dataset: output dir not empty (use force): " +
                                        cfg.root);
        fs::remove_all(root);
    }
    fs::create_directories(root);

    int singles = cfg.train_clips - 2 * cfg.train_pairs;
    if (singles < 0)
        throw std::invalid_argument("build_dataset: train_pairs exceed train_clips/2");
    if (cfg.val_clips % 2 || cfg.test_clips % 2)
        throw std::invalid_argument("build_dataset: val/test counts must be even (paired)");

    std::vector<PlannedClip> plan;
    std::vector<PairRef> train_pairs, val_pairs, test_pairs;

    auto alt_class = [](int base, int salt) { return (base + 1 + salt % 3) % 4; };

    for (int i = 0; i < singles; ++i)
        plan.push_back({clip_name(i), "train", Rng::derive(cfg.seed, kTrainSingleId + i),
                        Rng::derive(cfg.seed, kTrainSingleMo + i), i % 4});
    for (int p = 0; p < cfg.train_pairs; ++p) {
        uint64_t iseed = Rng::derive(cfg.seed, kTrainPairId + p);
        uint64_t mseed = Rng::derive(cfg.seed, kTrainPairMo + p);
        int ca = p % 4, cb = alt_class(ca, p / 4);
        std::string a = clip_name(singles + 2 * p), b = clip_name(singles + 2 * p + 1);
        plan.push_back({a, "train", iseed, mseed, ca});
        plan.push_back({b, "train", iseed, mseed, cb});
        train_pairs.push_back({a, b});
    }
    auto plan_duos = [&](const std::string& split, int count, uint64_t id_salt,
                         uint64_t mo_salt, std::vector<PairRef>& pairs) {
        for (int v = 0; v < count / 2; ++v) {
            uint64_t iseed = Rng::derive(cfg.seed, id_salt + v);
            uint64_t mseed = Rng::derive(cfg.seed, mo_salt + v);
            int ca = v % 4, cb = alt_class(ca, v / 4);
            std::string a = clip_name(2 * v), b = clip_name(2 * v + 1);
            plan.push_back({a, split, iseed, mseed, ca});
            plan.push_back({b, split, iseed, mseed, cb});
            pairs.push_back({a, b});
            pairs.push_back({b, a});
        }
    };
    plan_duos("val", cfg.val_clips, kValId, kValMo, val_pairs);
    plan_duos("test", cfg.test_clips, kTestId, kTestMo, test_pairs);

    RenderConfig rc;
    rc.H = cfg.H;
    rc.W = cfg.W;
    for (const auto& pc : plan) {
        Identity id = make_identity(pc.identity_seed, pc.scale_class);
        MotionSequence mo = make_motion(pc.motion_seed, cfg.T);
        Clip clip = render_clip(id, mo, rc);
        clip.id = pc.id;
        clip.split = pc.split;
        write_clip((root / pc.split / pc.id).string(), clip, pc.identity_seed);
    }

    auto write_pairs = [&](const std::string& split, const std::vector<PairRef>& pairs) {
        json arr = json::array();
        for (const auto& p : pairs) arr.push_back({{"source", p.source_id}, {"target", p.target_id}});
        fs::create_directories(root / split);
        write_file_atomic((root / split / "pairs.json").string(), arr.dump(2));
    };
    write_pairs("train", train_pairs);
    write_pairs("val", val_pairs);
    write_pairs("test", test_pairs);

    json man;
    man["format_version"] = 1;
    man["config"] = {{"train_clips", cfg.train_clips}, {"val_clips", cfg.val_clips},
                     {"test_clips", cfg.test_clips},   {"train_pairs", cfg.train_pairs},
                     {"T", cfg.T},                     {"H", cfg.H},
                     {"W", cfg.W},                     {"seed", cfg.seed}};
    json clips = json::array();
    for (const auto& pc : plan)
        clips.push_back({{"id", pc.id},
                         {"split", pc.split},
                         {"identity_seed", pc.identity_seed},
                         {"motion_seed", pc.motion_seed},
                         {"scale_class", pc.scale_class}});
    man["clips"] = clips;
    man["hash"] = fnv1a(clips.dump());
    write_file_atomic((root / "manifest.json").string(), man.dump(2));
}

// ---- Corpus --------------------------------------------------------------

Corpus::Corpus(const std::string& root) : root_(root) {
    json man = json::parse(read_file(root + "/manifest.json"));
    manifest_hash_ = man.at("hash").get<uint64_t>();
    T_ = man.at("config").at("T").get<int>();
    H_ = man.at("config").at("H").get<int>();
    W_ = man.at("config").at("W").get<int>();
    for (const auto& c : man.at("clips")) {
        ClipRef r;
        r.id = c.at("id").get<std::string>();
        r.split = c.at("split").get<std::string>();
        r.identity_seed = c.at("identity_seed").get<uint64_t>();
        r.motion_seed = c.at("motion_seed").get<uint64_t>();
        r.scale_class = c.at("scale_class").get<int>();
        if (r.split == "train")
            train_.push_back(r);
        else if (r.split == "val")
            val_.push_back(r);
        else
            test_.push_back(r);
    }
    for (const std::string split : {"train", "val", "test"}) {
        json arr = json::parse(read_file(root + "/" + split + "/pairs.json"));
        auto& dst = split == std::string("train") ? train_pairs_
                    : split == std::string("val") ? val_pairs_
                                                  : test_pairs_;
        for (const auto& p : arr)
            dst.push_back({p.at("source").get<std::string>(), p.at("target").get<std::string>()});
    }
}

const std::vector<ClipRef>& Corpus::split_ref(const std::string& s) const {
    if (s == "train") return train_;
    if (s == "val") return val_;
    if (s == "test") return test_;
    throw std::invalid_argument("Corpus: unknown split " + s);
}

const std::vector<ClipRef>& Corpus::clips(const std::string& split) const {
    return split_ref(split);
}

const std::vector<PairRef>& Corpus::pairs(const std::string& split) const {
    if (split == "train") return train_pairs_;
    if (split == "val") return val_pairs_;
    if (split == "test") return test_pairs_;
    throw std::invalid_argument("Corpus: unknown split " + split);
}

Clip Corpus::load(const std::string& split, const std::string& id) const {
    const std::string key = split + "/" + id;
    auto it = cache_.find(key);
    if (it == cache_.end()) {
        std::string dir = root_ + "/" + key;
        json meta = json::parse(read_file(dir + "/meta.json"));
        CachedClip cc;
        cc.motion_seed = meta.at("motion_seed").get<uint64_t>();
        cc.joints_clipped = meta.at("joints_clipped").get<bool>();
        cc.identity_seed = meta.at("identity_seed").get<uint64_t>();
        cc.scale_class = meta.at("identity").at("scale_class").get<int>();
        cc.T = meta.at("T").get<int>();
        cc.H = meta.at("H").get<int>();
        cc.W = meta.at("W").get<int>();
        cc.pixels.resize((size_t)cc.T * cc.H * cc.W * 3);
        for (int t = 0; t < cc.T; ++t) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%03d.png", t);
            ImageU8 img = load_png(dir + "/" + name);
            if (img.h != cc.H || img.w != cc.W || img.c != 3)
                throw std::runtime_error("Corpus: frame size mismatch for " + id);
            std::copy(img.data.begin(), img.data.end(),
                      cc.pixels.begin() + (size_t)t * cc.H * cc.W * 3);
        }
        json jj = json::parse(read_file(dir + "/joints.json"));
        auto shape = jj.at("shape").get<std::vector<int>>();
        cc.joints = Tensor(shape);
        auto data = jj.at("data").get<std::vector<float>>();
        if ((int64_t)data.size() != cc.joints.numel())
            throw std::runtime_error("Corpus: joints.json size mismatch for " + id);
        std::copy(data.begin(), data.end(), cc.joints.ptr());
        it = cache_.emplace(key, std::move(cc)).first;
    }

    const CachedClip& cc = it->second;
    Clip clip;
    clip.id = id;
    clip.split = split;
    clip.motion_seed = cc.motion_seed;
    clip.joints_clipped = cc.joints_clipped;
    clip.identity = make_identity(cc.identity_seed, cc.scale_class);
    clip.frames = Tensor({cc.T, cc.H, cc.W, 3});
    for (int64_t i = 0; i < clip.frames.numel(); ++i)
        clip.frames.data[(size_t)i] = cc.pixels[(size_t)i] * (1.0f / 255.0f);
    clip.joints = cc.joints;
    return clip;
}

}  // namespace imanim::skelgen
