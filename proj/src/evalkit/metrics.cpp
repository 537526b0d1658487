#include "imanim/evalkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace imanim::evalkit {

double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("psnr: shape mismatch");
    if (a.numel() == 0) throw std::invalid_argument("psnr: empty input");
    double se = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = (double)a.data[i] - (double)b.data[i];
        se += d * d;
    }
    const double mse = se / (double)a.numel();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Luminance plane as doubles; accepts (H,W) or (H,W,3).
std::vector<double> luminance(const Tensor& img, int& h, int& w) {
    if (img.shape.size() == 2) {
        h = img.shape[0];
        w = img.shape[1];
        std::vector<double> y((size_t)h * w);
        for (size_t i = 0; i < y.size(); ++i) y[i] = img.data[i];
        return y;
    }
    if (img.shape.size() == 3 && img.shape[2] == 3) {
        h = img.shape[0];
        w = img.shape[1];
        std::vector<double> y((size_t)h * w);
        for (int i = 0; i < h * w; ++i) {
            const float* p = img.data.data() + (size_t)i * 3;
            y[(size_t)i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
        return y;
    }
    throw std::invalid_argument("ssim: expected (H,W) or (H,W,3) input");
}

std::vector<double> gaussian_window() {
    std::vector<double> k(kWin * kWin);
    const int c = kWin / 2;
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
            const double dy = i - c, dx = j - c;
            k[(size_t)i * kWin + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * kSigma * kSigma));
            sum += k[(size_t)i * kWin + j];
        }
    for (double& v : k) v /= sum;
    return k;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("ssim: shape mismatch");
    int h = 0, w = 0;
    const std::vector<double> x = luminance(a, h, w);
    int h2 = 0, w2 = 0;
    const std::vector<double> y = luminance(b, h2, w2);
    if (h < kWin || w < kWin)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");

    static const std::vector<double> win = gaussian_window();
    const int oh = h - kWin + 1, ow = w - kWin + 1;
    double total = 0.0;
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int i = 0; i < kWin; ++i) {
                const size_t row = (size_t)(oy + i) * w + ox;
                const double* kr = win.data() + (size_t)i * kWin;
                for (int j = 0; j < kWin; ++j) {
                    const double k = kr[j];
                    const double xv = x[row + j], yv = y[row + j];
                    mx += k * xv;
                    my += k * yv;
                    mxx += k * xv * xv;
                    myy += k * yv * yv;
                    mxy += k * xv * yv;
                }
            }
            const double vx = mxx - mx * mx;
            const double vy = myy - my * my;
            const double cxy = mxy - mx * my;
            const double num = (2.0 * mx * my + kC1) * (2.0 * cxy + kC2);
            const double den = (mx * mx + my * my + kC1) * (vx + vy + kC2);
            total += num / den;
        }
    }
    return total / ((double)oh * ow);
}

Tensor extract_joints(const Tensor& heatmaps, int src_h, int src_w) {
    if (heatmaps.shape.size() != 3)
        throw std::invalid_argument("extract_joints: expected (J,h,w) heatmaps");
    const int J = heatmaps.shape[0], h = heatmaps.shape[1], w = heatmaps.shape[2];
    if (J < 1 || h < 1 || w < 1 || src_h < 1 || src_w < 1)
        throw std::invalid_argument("extract_joints: degenerate dimensions");

    Tensor out({J, 2});
    const double sx = (double)src_w / w, sy = (double)src_h / h;
    for (int j = 0; j < J; ++j) {
        const float* m = heatmaps.data.data() + (size_t)j * h * w;
        int best = 0;
        for (int i = 1; i < h * w; ++i)
            if (m[i] > m[best]) best = i;  // strict > keeps the lowest index on ties
        const int py = best / w, px = best % w;

        auto refine = [](double fm, double f0, double fp) {
            const double den = fm - 2.0 * f0 + fp;
            if (den >= 0.0) return 0.0;  // flat or non-peak curvature
            return std::clamp(0.5 * (fm - fp) / den, -0.5, 0.5);
        };
        double dx = 0.0, dy = 0.0;
        if (px > 0 && px < w - 1)
            dx = refine(m[(size_t)py * w + px - 1], m[(size_t)py * w + px], m[(size_t)py * w + px + 1]);
        if (py > 0 && py < h - 1)
            dy = refine(m[(size_t)(py - 1) * w + px], m[(size_t)py * w + px], m[(size_t)(py + 1) * w + px]);

        out.at(j, 0) = (float)((px + dx) * sx);
        out.at(j, 1) = (float)((py + dy) * sy);
    }
    return out;
}

double pck(const Tensor& pred, const Tensor& gt, double r) {
    if (gt.shape.size() != 2 || gt.shape[1] != 2 || gt.shape[0] < 1)
        throw std::invalid_argument("pck: gt must be (J,2) with J >= 1");
    if (pred.shape != gt.shape) throw std::invalid_argument("pck: shape mismatch");
    const int J = gt.shape[0];

    double min_x = gt.at(0, 0), max_x = gt.at(0, 0);
    double min_y = gt.at(0, 1), max_y = gt.at(0, 1);
    for (int j = 1; j < J; ++j) {
        min_x = std::min(min_x, (double)gt.at(j, 0));
        max_x = std::max(max_x, (double)gt.at(j, 0));
        min_y = std::min(min_y, (double)gt.at(j, 1));
        max_y = std::max(max_y, (double)gt.at(j, 1));
    }
    const double diag = std::hypot(max_x - min_x, max_y - min_y);
    const double thr = r * diag;

    int ok = 0;
    for (int j = 0; j < J; ++j) {
        const double d = std::hypot((double)pred.at(j, 0) - gt.at(j, 0),
                                    (double)pred.at(j, 1) - gt.at(j, 1));
        if (d <= thr) ++ok;
    }
    return (double)ok / J;
}

}  // namespace imanim::evalkit
