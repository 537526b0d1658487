#pragma once

// Three-stage training driver: run configuration, the bundle holding all
// three modules over one parameter store, a self-describing checkpoint
// container, the per-stage optimization loops, and the variant registry
// for the comparison experiments.

#include "imanim/core/graph.hpp"
#include "imanim/core/rng.hpp"
#include "imanim/motok/motok.hpp"
#include "imanim/nn/optim.hpp"
#include "imanim/retarget/retarget.hpp"
#include "imanim/skelgen/skelgen.hpp"
#include "imanim/vidgen/vidgen.hpp"

#include <json.hpp>

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace imanim::trainer {

// Everything a run needs, echoed verbatim into checkpoints and reports so
// any artifact can be traced back to its exact configuration.
struct RunConfig {
    std::string data_root;
    std::string out_dir;  // checkpoints + CSV log; empty = keep in memory only

    int stage = 1;
    std::string variant = "full";
    uint64_t seed = 1;

    int steps = -1;  // -1 -> stage default: 2000 / 4000 / 8000
    // per-stage budgets for multi-stage drivers; -1 falls through to `steps`
    int steps1 = -1, steps2 = -1, steps3 = -1;
    int batch = 16;  // clips per step

    float lr = 1e-4f;       // stages 1-2, single parameter group
    float lr_dit = 1e-5f;   // stage 3, video-generator group
    float lr_rest = 5e-5f;  // stage 3, all remaining modules
    float grad_clip = 1.0f;
    float weight_decay = 0.01f;

    float commit_weight = 0.25f;  // commitment term inside the VQ losses
    float alpha = 10.0f;          // retargeting term inside the stage-3 objective
    bool use_expression = true;   // feed expression adapters during stage 3

    int log_every = 25;
    int ckpt_every = 0;      // mid-run checkpoint period; 0 = final only
    int eval_every = 500;    // periodic held-out validation period; 0 = off
    int reseed_every = 500;  // dead-code reseed period
    float heat_sigma = 1.5f;

    motok::MotokConfig tok;
    retarget::RetargetConfig ret;
    vidgen::DiTConfig dit;

    int resolved_steps() const {
        int per = stage == 1 ? steps1 : stage == 2 ? steps2 : steps3;
        if (per >= 0) return per;
        if (steps >= 0) return steps;
        return stage == 1 ? 2000 : stage == 2 ? 4000 : 8000;
    }
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// All three modules constructed over one parameter store with one seeded
// init stream, so every stage (and every checkpoint) sees the same
// parameter names and the same initial values.
struct Models {
    ParamStore ps;
    std::unique_ptr<motok::MotionTokenizer> tok;
    std::unique_ptr<retarget::Retargeter> ret;
    std::unique_ptr<vidgen::VideoGenerator> gen;

    explicit Models(const RunConfig& cfg);
};

// Single-file checkpoint: magic + format version + JSON header (config
// echo, stage, step, corpus hash, metrics, RNG state, blob index) followed
// by named little-endian float32 blobs for weights and optimizer moments.
struct Checkpoint {
    static constexpr int kVersion = 1;

    int stage = 0;
    int step = 0;
    std::string variant = "full";
    uint64_t manifest_hash = 0;
    nlohmann::json config_echo;
    nlohmann::json metrics;
    std::string rng_state;  // training-loop stream at save time
    int64_t opt_step = 0;
    std::vector<int64_t> usage;  // codebook usage counters (reseed schedule state)

    std::vector<std::pair<std::string, Tensor>> weights;
    std::vector<std::pair<std::string, Tensor>> opt_m, opt_v;

    // Order-sensitive digest of the weight section (names, shapes, data);
    // downstream stages record it so hand-offs are verifiable.
    uint64_t weights_hash() const;

    void save(const std::string& path) const;     // atomic (temp + rename)
    static Checkpoint load(const std::string& path);
};

// Deep-copies every parameter (and, when given, the optimizer moments).
Checkpoint snapshot(const Models& m, const nn::AdamW* opt = nullptr);
// Writes checkpoint weights into the store; names and shapes must match
// the store exactly in both directions.
void restore_weights(Models& m, const Checkpoint& ck);
// Refills moment state; only names present in the checkpoint are restored.
void restore_optimizer(nn::AdamW& opt, const Checkpoint& ck);

struct LogRow {
    int step = 0;
    int stage = 0;
    double loss_total = 0.0;
    std::vector<std::pair<std::string, double>> terms;
    double lr = 0.0;
    double seconds = 0.0;  // wallclock since run start
};

// One held-out measurement taken during training (observation only: the
// training RNG stream and codebook counters are untouched).
struct ValRow {
    int step = 0;
    std::string metric;
    double value = 0.0;
};

struct StageResult {
    Checkpoint ckpt;
    std::vector<LogRow> log;
    std::vector<ValRow> val;  // one row per eval_every boundary
    std::string ckpt_path;    // empty when out_dir is empty
};

// Stage loops. `init` hands off the previous stage's weights (null = from
// scratch); `resume` continues an interrupted run of the same stage and
// restores weights, optimizer moments, and the RNG stream, so a resumed
// run is bitwise identical to an uninterrupted one.
StageResult train_stage1(const RunConfig& cfg, const skelgen::Corpus& corpus,
                         const Checkpoint* resume = nullptr);
StageResult train_stage2(const RunConfig& cfg, const skelgen::Corpus& corpus,
                         const Checkpoint* init, const Checkpoint* resume = nullptr);
StageResult train_stage3(const RunConfig& cfg, const skelgen::Corpus& corpus,
                         const Checkpoint* init, const Checkpoint* resume = nullptr);

// Expression offsets for a clip: face joints relative to the head,
// normalized by the identity's pixel scale.
Tensor clip_expression_offsets(const skelgen::Clip& clip);

// ---- variant registry ----------------------------------------------------

// Named model/training variants for the comparison table. `first_divergent_stage`
// is the earliest stage whose training differs from the full model, so runs
// can reuse the full model's earlier checkpoints; `scratch_handoff` marks
// schedules that deliberately drop the previous stage's weights.
struct VariantInfo {
    std::string name;
    std::string description;
    int first_divergent_stage = 1;
    bool scratch_handoff = false;
};

const std::vector<VariantInfo>& variant_registry();
// Applies the named variant's knobs to a config (and records the name).
// Unknown names throw.
void apply_variant(RunConfig& cfg, const std::string& name);

// Trains (or reuses, when the checkpoint already exists and its config
// matches) every stage a variant needs under `workdir`, sharing the full
// model's artifacts for stages before the variant diverges and honoring
// scratch hand-offs. Returns checkpoint paths indexed by stage (1..3;
// entries a variant never trains stay empty). The `sa_ret` alias shares
// artifacts with `C`.
std::array<std::string, 4> ensure_pipeline(RunConfig base, const skelgen::Corpus& corpus,
                                           const std::string& variant,
                                           const std::string& workdir);

}  // namespace imanim::trainer
