#pragma once

// Evaluation protocols over trained model bundles: the two linear
// disentanglement probes, cross/self reenactment scoring, the animation
// driver shared with the CLI, and JSON/CSV report writers.

#include "imanim/evalkit/metrics.hpp"
#include "imanim/skelgen/skelgen.hpp"
#include "imanim/trainer/trainer.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace imanim::evalkit {

// ---- linear probe machinery ------------------------------------------

// Closed-form multiclass ridge probe: features are z-scored with train
// statistics, targets are one-hot, the system is solved in double
// precision (primal when dims <= samples, dual otherwise). Deterministic,
// fixed capacity - probe strength can never be tuned to fake an outcome.
struct ProbeFit {
    double train_acc = 0, test_acc = 0;
};
ProbeFit fit_linear_probe(const std::vector<std::vector<float>>& x_train,
                          const std::vector<int>& y_train,
                          const std::vector<std::vector<float>>& x_test,
                          const std::vector<int>& y_test, int classes,
                          double lambda = 1.0);

struct ProbeResult {
    std::string probe;     // "identity_leakage" | "motion_leakage"
    std::string features;  // what was probed
    double train_acc = 0;
    double test_acc = 0;
    double chance = 0;        // 1 / classes
    double baseline_acc = 0;  // majority-class predictor on the test labels
    int classes = 0;
    int n_train = 0, n_test = 0;
};

// Main probe plus its two controls: the same probe on raw inputs (shows
// the signal exists upstream) and a label-shuffled fit (shows the probe
// cannot hallucinate signal).
struct ProbeSuite {
    ProbeResult main, contrast, shuffled;
};

// Can a linear reader recover the identity's scale class from mean-pooled
// pre-quantization motion tokens? Contrast: the same reader on mean-pooled
// raw patch pixels.
ProbeSuite identity_leakage_probe(trainer::Models& m, const skelgen::Corpus& corpus,
                                  uint64_t seed = 1, int max_train = -1, int max_test = -1);

// Can a linear reader recover the REFERENCE frame's root-bone angle bin
// (8 sectors) from the mean-pooled retargeted latent when the driving
// motion is shuffled across clips? Contrast: the same reader on the raw
// patchified reference frame.
ProbeSuite motion_leakage_probe(trainer::Models& m, const skelgen::Corpus& corpus,
                                uint64_t seed = 1, int max_train = -1, int max_test = -1);

// Root-bone direction (first child joint relative to the root) quantized
// into 8 equal sectors of [-pi, pi).
int root_angle_bin(const Tensor& joints_frame);

// ---- animation driver --------------------------------------------------

struct AnimationResult {
    Tensor frames;    // (T,H,W,3) decoded from the sampled latent, clamped to [0,1]
    Tensor heatmaps;  // (T,J,heat,heat) decoded from the retargeted grid
    Tensor joints;    // (T,J,2) extracted from those heatmaps, image pixels
    Tensor ret_grid;  // (T,g,g,D) retargeted latent (probe/diagnostic use)
};

// Full generation pipeline: motion tokens from the driving frames, joint
// retargeting against the reference frame, conditional sampling, latent
// decode. `drive_offsets` may be null to run without expression adapters.
AnimationResult animate(trainer::Models& m, const Tensor& drive_frames,
                        const Tensor* drive_offsets, const Tensor& ref_frame,
                        int sample_steps, Rng& noise_rng);

// ---- reenactment protocols ----------------------------------------------

struct ClipScore {
    std::string id;
    double psnr = 0, ssim = 0;
    double pck = 0;            // video-level: pose agreement through the shared
                               // tokenizer pose estimator (generated vs gt frames)
    double ret_pck = 0;        // retarget-level: decoded heatmap joints vs gt joints
    double ret_heat_mse = 0;   // decoded heatmaps vs target gt heatmaps
    double ret_heat_mse_src = 0;  // same vs SOURCE gt (cross protocol; self: == target)
    double baseline_psnr = 0;  // static-reference generator on the same item
    double motion_pred = 0;    // mean per-frame joint displacement, decoded track
    double motion_gt = 0;      // same for the ground-truth track
};

struct MetricReport {
    std::string schema_version = "1";
    std::string header;  // records the metric substitutions baked into this artifact
    std::string protocol;
    std::string variant;
    int clip_count = 0;
    // aggregates: means over clips
    double psnr = 0, ssim = 0, pck = 0, ret_pck = 0, ret_heat_mse = 0;
    double baseline_psnr = 0;
    double frac_beats_baseline = 0;   // clips with psnr > baseline_psnr
    double frac_target_closer = 0;    // clips with ret mse(target) < mse(source)
    double motion_ratio = 0;          // mean(motion_pred) / mean(motion_gt)
    std::vector<ClipScore> clips;
    nlohmann::json probes = nlohmann::json::object();
};

struct EvalOptions {
    int sample_steps = 20;
    uint64_t seed = 1;
    int max_clips = -1;          // cap on items (-1 = all)
    bool use_expression = true;  // feed expression offsets of the driving clip
    bool video = true;           // false: retarget-level metrics only (no sampling)
    double pck_r = 0.15;
    float heat_sigma = 1.5f;  // ground-truth heatmap width, matches training
    std::string split = "test";
};

// Generator override for oracle/baseline tests: maps an item to frames.
struct EvalItem {
    skelgen::Clip drive, target;
    std::string id;
};
using Generator = std::function<Tensor(trainer::Models&, const EvalItem&, Rng&)>;

// protocol "self": every test clip drives itself (reference = its frame 0).
// protocol "cross": test pairs, source drives the target identity, the
// target clip is ground truth.
MetricReport evaluate(trainer::Models& m, const skelgen::Corpus& corpus,
                      const std::string& protocol, const EvalOptions& opts = {},
                      const Generator* generator_override = nullptr);

void write_report_json(const MetricReport& r, const std::string& path);
void write_report_csv(const MetricReport& r, const std::string& path);
nlohmann::json to_json(const ProbeSuite& s);

}  // namespace imanim::evalkit
