#include "imanim/evalkit/evalkit.hpp"

#include "imanim/core/image.hpp"
#include "imanim/core/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

namespace imanim::evalkit {

using skelgen::Clip;
using skelgen::Corpus;

namespace {

constexpr const char* kHeaderNote =
    "Distribution-level video metrics (FID/FVD/LPIPS) are replaced by "
    "exact-reference scores: PSNR and SSIM against the ground-truth clip, "
    "plus skeleton-specific pose agreement (PCK, heatmap MSE). The corpus "
    "is synthetic with exact per-frame ground truth, so learned-feature "
    "distribution metrics would only add estimator variance.";

// ---- small dense linear algebra (double) ---------------------------------

// Solves A X = B for symmetric positive-definite A (n x n) and B (n x k),
// via an in-place Cholesky factorization. Throws if A is not SPD.
std::vector<double> chol_solve(std::vector<double> a, int n, std::vector<double> b, int k) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[(size_t)i * n + j];
            for (int p = 0; p < j; ++p) s -= a[(size_t)i * n + p] * a[(size_t)j * n + p];
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("probe solve: matrix not positive definite");
                a[(size_t)i * n + j] = std::sqrt(s);
            } else {
                a[(size_t)i * n + j] = s / a[(size_t)j * n + j];
            }
        }
    }
    // forward substitution L y = b, then back substitution L^T x = y
    for (int c = 0; c < k; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = b[(size_t)i * k + c];
            for (int p = 0; p < i; ++p) s -= a[(size_t)i * n + p] * b[(size_t)p * k + c];
            b[(size_t)i * k + c] = s / a[(size_t)i * n + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = b[(size_t)i * k + c];
            for (int p = i + 1; p < n; ++p) s -= a[(size_t)p * n + i] * b[(size_t)p * k + c];
            b[(size_t)i * k + c] = s / a[(size_t)i * n + i];
        }
    }
    return b;
}

int argmax_row(const double* row, int k) {
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

double accuracy(const std::vector<double>& scores, const std::vector<int>& y, int k) {
    if (y.empty()) return 0.0;
    int hit = 0;
    for (size_t i = 0; i < y.size(); ++i)
        if (argmax_row(&scores[i * (size_t)k], k) == y[i]) ++hit;
    return (double)hit / (double)y.size();
}

double majority_baseline(const std::vector<int>& y_train, const std::vector<int>& y_test,
                         int classes) {
    std::vector<int> count((size_t)classes, 0);
    for (int y : y_train) ++count[(size_t)y];
    int maj = (int)(std::max_element(count.begin(), count.end()) - count.begin());
    if (y_test.empty()) return 0.0;
    int hit = 0;
    for (int y : y_test)
        if (y == maj) ++hit;
    return (double)hit / (double)y_test.size();
}

// ---- feature helpers ------------------------------------------------------

// mean over the leading rows of a (rows, width) view
std::vector<float> mean_pool(const Tensor& t, int width) {
    if (t.numel() % width != 0) throw std::invalid_argument("mean_pool: width mismatch");
    int64_t rows = t.numel() / width;
    std::vector<double> acc((size_t)width, 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < width; ++c) acc[(size_t)c] += t.data[(size_t)(r * width + c)];
    std::vector<float> out((size_t)width);
    for (int c = 0; c < width; ++c) out[(size_t)c] = (float)(acc[(size_t)c] / (double)rows);
    return out;
}

// mean over frames and patch positions of the within-patch pixel layout
// (py, px, c): what a patch embedding sees, before any learned weights.
std::vector<float> mean_raw_patches(const Tensor& frames, int patch) {
    int T = frames.shape[0], H = frames.shape[1], W = frames.shape[2];
    int d = patch * patch * 3;
    std::vector<double> acc((size_t)d, 0.0);
    int64_t count = (int64_t)T * (H / patch) * (W / patch);
    for (int t = 0; t < T; ++t)
        for (int by = 0; by < H / patch; ++by)
            for (int bx = 0; bx < W / patch; ++bx)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int c = 0; c < 3; ++c)
                            acc[(size_t)((py * patch + px) * 3 + c)] +=
                                frames.at(t, by * patch + py, bx * patch + px, c);
    std::vector<float> out((size_t)d);
    for (int i = 0; i < d; ++i) out[(size_t)i] = (float)(acc[(size_t)i] / (double)count);
    return out;
}

Tensor frame_slice(const Tensor& stack, int t) {
    std::vector<int> s(stack.shape.begin() + 1, stack.shape.end());
    Tensor out(s);
    int64_t n = out.numel();
    std::copy_n(stack.data.begin() + (size_t)t * n, n, out.data.begin());
    return out;
}

double tensor_mse(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("tensor_mse: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = (double)a.data[(size_t)i] - (double)b.data[(size_t)i];
        s += d * d;
    }
    return s / (double)a.numel();
}

// mean per-frame joint displacement over a (T, J, 2) track
double motion_magnitude(const Tensor& track) {
    int T = track.shape[0], J = track.shape[1];
    if (T < 2) return 0.0;
    double s = 0.0;
    for (int t = 1; t < T; ++t)
        for (int j = 0; j < J; ++j) {
            double dx = track.at(t, j, 0) - track.at(t - 1, j, 0);
            double dy = track.at(t, j, 1) - track.at(t - 1, j, 1);
            s += std::sqrt(dx * dx + dy * dy);
        }
    return s / (double)((T - 1) * J);
}

struct LabeledFeatures {
    std::vector<std::vector<float>> main, contrast;
    std::vector<int> labels;
};

ProbeResult make_result(const std::string& probe, const std::string& features, int classes,
                        const ProbeFit& fit, const LabeledFeatures& tr,
                        const LabeledFeatures& te) {
    ProbeResult r;
    r.probe = probe;
    r.features = features;
    r.train_acc = fit.train_acc;
    r.test_acc = fit.test_acc;
    r.chance = 1.0 / (double)classes;
    r.baseline_acc = majority_baseline(tr.labels, te.labels, classes);
    r.classes = classes;
    r.n_train = (int)tr.labels.size();
    r.n_test = (int)te.labels.size();
    return r;
}

ProbeSuite fit_suite(const std::string& probe, const std::string& main_tag,
                     const std::string& contrast_tag, int classes, const LabeledFeatures& tr,
                     const LabeledFeatures& te, uint64_t seed) {
    ProbeSuite s;
    s.main = make_result(probe, main_tag, classes,
                         fit_linear_probe(tr.main, tr.labels, te.main, te.labels, classes), tr, te);
    s.contrast =
        make_result(probe, contrast_tag, classes,
                    fit_linear_probe(tr.contrast, tr.labels, te.contrast, te.labels, classes), tr, te);
    std::vector<int> shuffled = tr.labels;
    Rng rng(Rng::derive(seed, fnv1a("label-shuffle")));
    for (int i = (int)shuffled.size() - 1; i > 0; --i)
        std::swap(shuffled[(size_t)i], shuffled[(size_t)rng.uniform_int(0, i)]);
    s.shuffled =
        make_result(probe, main_tag + " (label-shuffled control)", classes,
                    fit_linear_probe(tr.main, shuffled, te.main, te.labels, classes), tr, te);
    return s;
}

std::vector<skelgen::ClipRef> capped_refs(const Corpus& corpus, const std::string& split,
                                          int cap) {
    std::vector<skelgen::ClipRef> refs = corpus.clips(split);
    if (cap >= 0 && (int)refs.size() > cap) refs.resize((size_t)cap);
    if (refs.empty()) throw std::runtime_error("probe: split '" + split + "' is empty");
    return refs;
}

struct RetBundle {
    Tensor grid;    // (T, g, g, D)
    Tensor heat;    // (T, J, heat, heat)
    Tensor joints;  // (T, J, 2) image pixels
};

RetBundle run_retarget(trainer::Models& m, const Tensor& drive_frames, const Tensor& ref_frame) {
    Tape tp;
    Var pre = m.tok->encode_frames(tp, drive_frames);
    auto q = m.tok->quantize(tp, pre);
    Var seq = m.ret->assemble_motion_sequence(tp, q.values);
    Var ref_tokens = m.ret->encode_reference(tp, ref_frame);
    int T = drive_frames.shape[0];
    Var grid = m.ret->retarget(tp, seq, ref_tokens, T);
    Var heat = m.ret->decode_retargeted_joints(tp, grid, *m.tok);
    RetBundle out;
    out.grid = grid->val;
    out.heat = heat->val;
    int J = out.heat.shape[1];
    out.joints = Tensor({T, J, 2});
    for (int t = 0; t < T; ++t) {
        Tensor jf = extract_joints(frame_slice(out.heat, t), ref_frame.shape[0], ref_frame.shape[1]);
        std::copy_n(jf.data.begin(), (size_t)J * 2, out.joints.data.begin() + (size_t)t * J * 2);
    }
    return out;
}

// pose track of an RGB clip through the tokenizer's joint decoder; used as
// the shared estimator so that identical videos score identical tracks
Tensor estimate_track(trainer::Models& m, const Tensor& frames) {
    Tape tp;
    Var pre = m.tok->encode_frames(tp, frames);
    auto q = m.tok->quantize(tp, pre);
    Var heat = m.tok->decode_joints(tp, q.values);
    const Tensor& hm = heat->val;
    int T = hm.shape[0], J = hm.shape[1];
    Tensor track({T, J, 2});
    for (int t = 0; t < T; ++t) {
        Tensor jf = extract_joints(frame_slice(hm, t), frames.shape[1], frames.shape[2]);
        std::copy_n(jf.data.begin(), (size_t)J * 2, track.data.begin() + (size_t)t * J * 2);
    }
    return track;
}

double mean_pck(const Tensor& pred, const Tensor& gt, double r) {
    int T = pred.shape[0];
    double s = 0.0;
    for (int t = 0; t < T; ++t) s += pck(frame_slice(pred, t), frame_slice(gt, t), r);
    return s / (double)T;
}

double mean_ssim(const Tensor& a, const Tensor& b) {
    int T = a.shape[0];
    double s = 0.0;
    for (int t = 0; t < T; ++t) s += ssim(frame_slice(a, t), frame_slice(b, t));
    return s / (double)T;
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

nlohmann::json jnum(double v) {
    if (std::isinf(v) || std::isnan(v)) return fmt(v);
    return v;
}

nlohmann::json probe_json(const ProbeResult& p) {
    return {{"probe", p.probe},          {"features", p.features},
            {"train_acc", p.train_acc},  {"test_acc", p.test_acc},
            {"chance", p.chance},        {"baseline_acc", p.baseline_acc},
            {"classes", p.classes},      {"n_train", p.n_train},
            {"n_test", p.n_test}};
}

}  // namespace

// ---- linear probe ----------------------------------------------------------

ProbeFit fit_linear_probe(const std::vector<std::vector<float>>& x_train,
                          const std::vector<int>& y_train,
                          const std::vector<std::vector<float>>& x_test,
                          const std::vector<int>& y_test, int classes, double lambda) {
    if (x_train.empty() || x_train.size() != y_train.size() || x_test.size() != y_test.size())
        throw std::invalid_argument("fit_linear_probe: inconsistent inputs");
    int n = (int)x_train.size(), d = (int)x_train[0].size();
    if (d == 0 || classes < 2) throw std::invalid_argument("fit_linear_probe: bad dimensions");
    for (const auto& v : x_train)
        if ((int)v.size() != d) throw std::invalid_argument("fit_linear_probe: ragged features");
    for (const auto& v : x_test)
        if ((int)v.size() != d) throw std::invalid_argument("fit_linear_probe: ragged features");
    for (int y : y_train)
        if (y < 0 || y >= classes) throw std::invalid_argument("fit_linear_probe: label out of range");
    for (int y : y_test)
        if (y < 0 || y >= classes) throw std::invalid_argument("fit_linear_probe: label out of range");

    // z-score with train statistics, then append a bias column
    std::vector<double> mean((size_t)d, 0.0), sd((size_t)d, 0.0);
    for (const auto& v : x_train)
        for (int j = 0; j < d; ++j) mean[(size_t)j] += v[(size_t)j];
    for (int j = 0; j < d; ++j) mean[(size_t)j] /= n;
    for (const auto& v : x_train)
        for (int j = 0; j < d; ++j) {
            double c = v[(size_t)j] - mean[(size_t)j];
            sd[(size_t)j] += c * c;
        }
    for (int j = 0; j < d; ++j) sd[(size_t)j] = std::max(std::sqrt(sd[(size_t)j] / n), 1e-8);

    int D = d + 1;
    auto standardize = [&](const std::vector<std::vector<float>>& x) {
        std::vector<double> out((size_t)x.size() * D);
        for (size_t i = 0; i < x.size(); ++i) {
            for (int j = 0; j < d; ++j)
                out[i * D + (size_t)j] = (x[i][(size_t)j] - mean[(size_t)j]) / sd[(size_t)j];
            out[i * D + (size_t)d] = 1.0;
        }
        return out;
    };
    std::vector<double> xtr = standardize(x_train), xte = standardize(x_test);
    std::vector<double> y((size_t)n * classes, 0.0);
    for (int i = 0; i < n; ++i) y[(size_t)i * classes + y_train[(size_t)i]] = 1.0;

    // ridge weights (D x classes): primal normal equations when the feature
    // count is small, dual (Gram) form when it exceeds the sample count
    std::vector<double> w;
    if (D <= n) {
        std::vector<double> g((size_t)D * D, 0.0), r((size_t)D * classes, 0.0);
        for (int i = 0; i < n; ++i) {
            const double* xi = &xtr[(size_t)i * D];
            for (int a = 0; a < D; ++a) {
                for (int b = a; b < D; ++b) g[(size_t)a * D + b] += xi[a] * xi[b];
                for (int c = 0; c < classes; ++c)
                    r[(size_t)a * classes + c] += xi[a] * y[(size_t)i * classes + c];
            }
        }
        for (int a = 0; a < D; ++a) {
            for (int b = 0; b < a; ++b) g[(size_t)a * D + b] = g[(size_t)b * D + a];
            g[(size_t)a * D + a] += lambda;
        }
        w = chol_solve(std::move(g), D, std::move(r), classes);
    } else {
        std::vector<double> gram((size_t)n * n, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                double s = 0.0;
                const double *xi = &xtr[(size_t)i * D], *xj = &xtr[(size_t)j * D];
                for (int a = 0; a < D; ++a) s += xi[a] * xj[a];
                gram[(size_t)i * n + j] = s;
                gram[(size_t)j * n + i] = s;
            }
        for (int i = 0; i < n; ++i) gram[(size_t)i * n + i] += lambda;
        std::vector<double> alpha = chol_solve(std::move(gram), n, y, classes);
        w.assign((size_t)D * classes, 0.0);
        for (int i = 0; i < n; ++i) {
            const double* xi = &xtr[(size_t)i * D];
            for (int a = 0; a < D; ++a)
                for (int c = 0; c < classes; ++c)
                    w[(size_t)a * classes + c] += xi[a] * alpha[(size_t)i * classes + c];
        }
    }

    auto scores = [&](const std::vector<double>& x, size_t rows) {
        std::vector<double> out(rows * classes, 0.0);
        for (size_t i = 0; i < rows; ++i)
            for (int a = 0; a < D; ++a) {
                double xv = x[i * D + (size_t)a];
                for (int c = 0; c < classes; ++c)
                    out[i * classes + (size_t)c] += xv * w[(size_t)a * classes + c];
            }
        return out;
    };
    ProbeFit fit;
    fit.train_acc = accuracy(scores(xtr, (size_t)n), y_train, classes);
    fit.test_acc = accuracy(scores(xte, x_test.size()), y_test, classes);
    return fit;
}

// ---- probes -----------------------------------------------------------------

ProbeSuite identity_leakage_probe(trainer::Models& m, const Corpus& corpus, uint64_t seed,
                                  int max_train, int max_test) {
    int patch = m.tok->config().patch;
    int C_m = m.tok->config().C_m;
    auto collect = [&](const std::string& split, int cap) {
        LabeledFeatures f;
        for (const auto& ref : capped_refs(corpus, split, cap)) {
            Clip c = corpus.load(split, ref.id);
            Tape tp;
            Var pre = m.tok->encode_frames(tp, c.frames);
            f.main.push_back(mean_pool(pre->val, C_m));
            f.contrast.push_back(mean_raw_patches(c.frames, patch));
            f.labels.push_back(ref.scale_class);
        }
        return f;
    };
    LabeledFeatures tr = collect("train", max_train), te = collect("test", max_test);
    return fit_suite("identity_leakage", "mean-pooled pre-quantization motion tokens",
                     "mean-pooled raw patch pixels", 4, tr, te, seed);
}

ProbeSuite motion_leakage_probe(trainer::Models& m, const Corpus& corpus, uint64_t seed,
                                int max_train, int max_test) {
    int D = m.ret->config().D;
    auto collect = [&](const std::string& split, int cap) {
        LabeledFeatures f;
        auto refs = capped_refs(corpus, split, cap);
        // pair every reference with a donor motion drawn from another clip,
        // so any pose signal left in the latent must come from the reference
        std::vector<int> perm((size_t)refs.size());
        for (size_t i = 0; i < perm.size(); ++i) perm[i] = (int)i;
        Rng rng(Rng::derive(seed, fnv1a("motion-shuffle-" + split)));
        for (int i = (int)perm.size() - 1; i > 0; --i)
            std::swap(perm[(size_t)i], perm[(size_t)rng.uniform_int(0, i)]);
        for (size_t i = 0; i < refs.size(); ++i) {
            Clip self = corpus.load(split, refs[i].id);
            Clip donor = corpus.load(split, refs[(size_t)perm[i]].id);
            Tensor ref_frame = frame_slice(self.frames, 0);
            RetBundle rb = run_retarget(m, donor.frames, ref_frame);
            f.main.push_back(mean_pool(rb.grid, D));
            f.contrast.push_back(
                std::vector<float>(ref_frame.data.begin(), ref_frame.data.end()));
            f.labels.push_back(root_angle_bin(frame_slice(self.joints, 0)));
        }
        return f;
    };
    LabeledFeatures tr = collect("train", max_train), te = collect("test", max_test);
    return fit_suite("motion_leakage", "mean-pooled retargeted latent (shuffled motion)",
                     "raw reference-frame pixels", 8, tr, te, seed);
}

int root_angle_bin(const Tensor& joints_frame) {
    if (joints_frame.ndim() != 2 || joints_frame.shape[1] != 2 || joints_frame.shape[0] < 2)
        throw std::invalid_argument("root_angle_bin: expected (J, 2) with J >= 2");
    const auto& topo = skelgen::SkeletonTopology::standard();
    int child = 1;
    for (int j = 1; j < (int)topo.parent.size(); ++j)
        if (topo.parent[(size_t)j] == 0) {
            child = j;
            break;
        }
    double dx = joints_frame.at(child, 0) - joints_frame.at(0, 0);
    double dy = joints_frame.at(child, 1) - joints_frame.at(0, 1);
    double theta = std::atan2(dy, dx);  // [-pi, pi]
    int bin = (int)std::floor((theta + std::numbers::pi) / (std::numbers::pi / 4.0));
    return std::clamp(bin, 0, 7);
}

// ---- animation driver --------------------------------------------------------

AnimationResult animate(trainer::Models& m, const Tensor& drive_frames,
                        const Tensor* drive_offsets, const Tensor& ref_frame, int sample_steps,
                        Rng& noise_rng) {
    if (drive_frames.ndim() != 4 || ref_frame.ndim() != 3)
        throw std::invalid_argument("animate: expected (T,H,W,3) drive and (H,W,3) reference");
    RetBundle rb = run_retarget(m, drive_frames, ref_frame);
    AnimationResult out;
    out.ret_grid = rb.grid;
    out.heatmaps = rb.heat;
    out.joints = rb.joints;
    Tensor lat = m.gen->sample(rb.grid, drive_offsets, sample_steps, noise_rng);
    retarget::LatentCodec codec{m.gen->config().f};
    out.frames = codec.decode(lat);
    for (float& v : out.frames.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

// ---- reenactment protocols -----------------------------------------------------

MetricReport evaluate(trainer::Models& m, const Corpus& corpus, const std::string& protocol,
                      const EvalOptions& opts, const Generator* generator_override) {
    if (protocol != "self" && protocol != "cross")
        throw std::invalid_argument("evaluate: protocol must be 'self' or 'cross'");

    std::vector<EvalItem> items;
    if (protocol == "self") {
        for (const auto& ref : capped_refs(corpus, opts.split, opts.max_clips)) {
            EvalItem it;
            it.target = corpus.load(opts.split, ref.id);
            it.drive = it.target;
            it.id = ref.id;
            items.push_back(std::move(it));
        }
    } else {
        std::vector<skelgen::PairRef> prs = corpus.pairs(opts.split);
        if (opts.max_clips >= 0 && (int)prs.size() > opts.max_clips)
            prs.resize((size_t)opts.max_clips);
        if (prs.empty()) throw std::runtime_error("evaluate: no pairs in split " + opts.split);
        for (const auto& pr : prs) {
            EvalItem it;
            it.drive = corpus.load(opts.split, pr.source_id);
            it.target = corpus.load(opts.split, pr.target_id);
            it.id = pr.source_id + "->" + pr.target_id;
            items.push_back(std::move(it));
        }
    }

    MetricReport r;
    r.header = kHeaderNote;
    r.protocol = protocol;
    r.clip_count = (int)items.size();
    int heat = m.tok->config().heat();
    float sigma = opts.heat_sigma;
    retarget::LatentCodec codec{m.gen->config().f};

    double sum_motion_pred = 0.0, sum_motion_gt = 0.0;
    int beats = 0, closer = 0;
    for (const auto& item : items) {
        const Tensor& gt_frames = item.target.frames;
        int T = item.drive.frames.shape[0];
        if (gt_frames.shape[0] != T)
            throw std::runtime_error("evaluate: drive/target frame counts differ for " + item.id);
        int H = gt_frames.shape[1], W = gt_frames.shape[2];

        ClipScore cs;
        cs.id = item.id;
        Tensor ref_frame = frame_slice(gt_frames, 0);
        RetBundle rb = run_retarget(m, item.drive.frames, ref_frame);

        Tensor gt_heat = skelgen::rasterize_heatmaps(item.target.joints, H, W, heat, heat, sigma);
        cs.ret_heat_mse = tensor_mse(rb.heat, gt_heat);
        if (protocol == "cross") {
            Tensor src_heat =
                skelgen::rasterize_heatmaps(item.drive.joints, H, W, heat, heat, sigma);
            cs.ret_heat_mse_src = tensor_mse(rb.heat, src_heat);
        } else {
            cs.ret_heat_mse_src = cs.ret_heat_mse;
        }
        cs.ret_pck = mean_pck(rb.joints, item.target.joints, opts.pck_r);
        cs.motion_pred = motion_magnitude(rb.joints);
        cs.motion_gt = motion_magnitude(item.target.joints);
        sum_motion_pred += cs.motion_pred;
        sum_motion_gt += cs.motion_gt;
        if (cs.ret_heat_mse < cs.ret_heat_mse_src) ++closer;

        if (opts.video) {
            Rng noise(Rng::derive(opts.seed, fnv1a(item.id)));
            Tensor frames;
            if (generator_override) {
                frames = (*generator_override)(m, item, noise);
            } else {
                Tensor offsets;
                const Tensor* off_ptr = nullptr;
                if (opts.use_expression) {
                    offsets = trainer::clip_expression_offsets(item.drive);
                    off_ptr = &offsets;
                }
                Tensor lat = m.gen->sample(rb.grid, off_ptr, opts.sample_steps, noise);
                frames = codec.decode(lat);
                for (float& v : frames.data) v = std::clamp(v, 0.0f, 1.0f);
            }
            cs.psnr = psnr(frames, gt_frames);
            cs.ssim = mean_ssim(frames, gt_frames);
            Tensor est_pred = estimate_track(m, frames);
            Tensor est_gt = estimate_track(m, gt_frames);
            cs.pck = mean_pck(est_pred, est_gt, opts.pck_r);
            Tensor static_ref({T, H, W, 3});
            for (int t = 0; t < T; ++t)
                std::copy_n(ref_frame.data.begin(), ref_frame.data.size(),
                            static_ref.data.begin() + (size_t)t * ref_frame.data.size());
            cs.baseline_psnr = psnr(static_ref, gt_frames);
            if (cs.psnr > cs.baseline_psnr) ++beats;
        }
        r.clips.push_back(std::move(cs));
    }

    double n = (double)items.size();
    for (const auto& cs : r.clips) {
        r.psnr += cs.psnr / n;
        r.ssim += cs.ssim / n;
        r.pck += cs.pck / n;
        r.ret_pck += cs.ret_pck / n;
        r.ret_heat_mse += cs.ret_heat_mse / n;
        r.baseline_psnr += cs.baseline_psnr / n;
    }
    r.frac_beats_baseline = (double)beats / n;
    r.frac_target_closer = (double)closer / n;
    r.motion_ratio = sum_motion_gt > 0.0 ? sum_motion_pred / sum_motion_gt : 0.0;
    return r;
}

// ---- report writers ---------------------------------------------------------------

void write_report_json(const MetricReport& r, const std::string& path) {
    nlohmann::json j;
    j["schema_version"] = r.schema_version;
    j["header"] = r.header;
    j["protocol"] = r.protocol;
    j["variant"] = r.variant;
    j["clip_count"] = r.clip_count;
    j["aggregates"] = {{"psnr", jnum(r.psnr)},
                       {"ssim", jnum(r.ssim)},
                       {"pck", jnum(r.pck)},
                       {"ret_pck", jnum(r.ret_pck)},
                       {"ret_heat_mse", jnum(r.ret_heat_mse)},
                       {"baseline_psnr", jnum(r.baseline_psnr)},
                       {"frac_beats_baseline", jnum(r.frac_beats_baseline)},
                       {"frac_target_closer", jnum(r.frac_target_closer)},
                       {"motion_ratio", jnum(r.motion_ratio)}};
    j["probes"] = r.probes;
    nlohmann::json clips = nlohmann::json::array();
    for (const auto& c : r.clips)
        clips.push_back({{"id", c.id},
                         {"psnr", jnum(c.psnr)},
                         {"ssim", jnum(c.ssim)},
                         {"pck", jnum(c.pck)},
                         {"ret_pck", jnum(c.ret_pck)},
                         {"ret_heat_mse", jnum(c.ret_heat_mse)},
                         {"ret_heat_mse_src", jnum(c.ret_heat_mse_src)},
                         {"baseline_psnr", jnum(c.baseline_psnr)},
                         {"motion_pred", jnum(c.motion_pred)},
                         {"motion_gt", jnum(c.motion_gt)}});
    j["clips"] = std::move(clips);
    write_file_atomic(path, j.dump(2) + "\n");
}

void write_report_csv(const MetricReport& r, const std::string& path) {
    std::string out =
        "schema_version,id,psnr,ssim,pck,ret_pck,ret_heat_mse,ret_heat_mse_src,"
        "baseline_psnr,motion_pred,motion_gt\n";
    for (const auto& c : r.clips) {
        out += r.schema_version + "," + c.id + "," + fmt(c.psnr) + "," + fmt(c.ssim) + "," +
               fmt(c.pck) + "," + fmt(c.ret_pck) + "," + fmt(c.ret_heat_mse) + "," +
               fmt(c.ret_heat_mse_src) + "," + fmt(c.baseline_psnr) + "," + fmt(c.motion_pred) +
               "," + fmt(c.motion_gt) + "\n";
    }
    write_file_atomic(path, out);
}

nlohmann::json to_json(const ProbeSuite& s) {
    return {{"main", probe_json(s.main)},
            {"contrast", probe_json(s.contrast)},
            {"shuffled", probe_json(s.shuffled)}};
}

}  // namespace imanim::evalkit
