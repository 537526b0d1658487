#include "doctest.h"

#include "imanim/core/rng.hpp"
#include "imanim/evalkit/metrics.hpp"
#include "imanim/skelgen/skelgen.hpp"

#include <cmath>
#include <limits>
#include <vector>

using namespace imanim;
using doctest::Approx;

TEST_CASE("psnr: hand case, infinity sentinel, validation") {
    Tensor a({2, 2}), b({2, 2});
    for (int i = 0; i < 4; ++i) b.data[i] = 0.5f;
    // MSE 0.25 -> 10*log10(1/0.25) = 6.0206 dB
    CHECK(evalkit::psnr(a, b) == Approx(6.0205999133).epsilon(1e-9));
    CHECK(std::isinf(evalkit::psnr(b, b)));
    CHECK(evalkit::psnr(b, b) > 0);

    Tensor c({3});
    CHECK_THROWS_AS(evalkit::psnr(a, c), std::invalid_argument);
    Tensor e1({0}), e2({0});
    CHECK_THROWS_AS(evalkit::psnr(e1, e2), std::invalid_argument);

    // order-free and monotone in error magnitude
    Tensor d({2, 2});
    for (int i = 0; i < 4; ++i) d.data[i] = 0.25f;
    CHECK(evalkit::psnr(a, d) == Approx(evalkit::psnr(d, a)));
    CHECK(evalkit::psnr(a, d) > evalkit::psnr(a, b));
}

namespace {

// Independent SSIM evaluation for the test: image-sized mean maps first,
// then central moments in a second pass over each window. Same definition,
// different float path.
double ssim_oracle(const std::vector<double>& x, const std::vector<double>& y, int h, int w) {
    const int W = 11;
    const double sig = 1.5, C1 = 1e-4, C2 = 9e-4;
    std::vector<double> k(W * W);
    double s = 0;
    for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) {
            double dy = i - 5, dx = j - 5;
            k[i * W + j] = std::exp(-(dy * dy + dx * dx) / (2 * sig * sig));
            s += k[i * W + j];
        }
    for (double& v : k) v /= s;

    double total = 0;
    int n = 0;
    for (int oy = 0; oy + W <= h; ++oy)
        for (int ox = 0; ox + W <= w; ++ox) {
            double mx = 0, my = 0;
            for (int i = 0; i < W; ++i)
                for (int j = 0; j < W; ++j) {
                    mx += k[i * W + j] * x[(oy + i) * w + ox + j];
                    my += k[i * W + j] * y[(oy + i) * w + ox + j];
                }
            double vx = 0, vy = 0, cxy = 0;
            for (int i = 0; i < W; ++i)
                for (int j = 0; j < W; ++j) {
                    double dx = x[(oy + i) * w + ox + j] - mx;
                    double dy = y[(oy + i) * w + ox + j] - my;
                    vx += k[i * W + j] * dx * dx;
                    vy += k[i * W + j] * dy * dy;
                    cxy += k[i * W + j] * dx * dy;
                }
            total += ((2 * mx * my + C1) * (2 * cxy + C2)) /
                     ((mx * mx + my * my + C1) * (vx + vy + C2));
            ++n;
        }
    return total / n;
}

}  // namespace

TEST_CASE("ssim: identity, constant-image hand value, oracle agreement, validation") {
    Rng rng(11);
    Tensor a({16, 20, 3}), b({16, 20, 3});
    for (int64_t i = 0; i < a.numel(); ++i) {
        a.data[(size_t)i] = (float)rng.uniform();
        b.data[(size_t)i] = (float)rng.uniform();
    }
    CHECK(evalkit::ssim(a, a) == Approx(1.0).epsilon(1e-12));

    // constant images: variances vanish, closed form remains
    Tensor ca({12, 12}), cb({12, 12});
    for (int64_t i = 0; i < ca.numel(); ++i) {
        ca.data[(size_t)i] = 0.3f;
        cb.data[(size_t)i] = 0.5f;
    }
    const double mx = 0.3f, my = 0.5f, C1 = 1e-4;
    CHECK(evalkit::ssim(ca, cb) ==
          Approx((2 * mx * my + C1) / (mx * mx + my * my + C1)).epsilon(1e-9));

    // oracle over random RGB content (luminance reduction applied here too)
    std::vector<double> lx(16 * 20), ly(16 * 20);
    for (int i = 0; i < 16 * 20; ++i) {
        const float* pa = a.ptr() + (size_t)i * 3;
        const float* pb = b.ptr() + (size_t)i * 3;
        lx[i] = 0.299 * pa[0] + 0.587 * pa[1] + 0.114 * pa[2];
        ly[i] = 0.299 * pb[0] + 0.587 * pb[1] + 0.114 * pb[2];
    }
    CHECK(evalkit::ssim(a, b) == Approx(ssim_oracle(lx, ly, 16, 20)).epsilon(1e-6));
    CHECK(evalkit::ssim(a, b) < 1.0);

    Tensor tiny({10, 30});
    CHECK_THROWS_AS(evalkit::ssim(tiny, tiny), std::invalid_argument);
    Tensor other({16, 20});
    CHECK_THROWS_AS(evalkit::ssim(a, other), std::invalid_argument);
    Tensor rgba({16, 20, 4});
    CHECK_THROWS_AS(evalkit::ssim(rgba, rgba), std::invalid_argument);
}

TEST_CASE("extract_joints: tie convention, grid-aligned exactness, subpixel refinement") {
    // constant map: every value ties, lowest row-major index wins -> (0,0)
    Tensor flat({1, 8, 8});
    for (int64_t i = 0; i < flat.numel(); ++i) flat.data[(size_t)i] = 0.25f;
    Tensor j0 = evalkit::extract_joints(flat, 64, 64);
    CHECK(j0.at(0, 0) == 0.0f);
    CHECK(j0.at(0, 1) == 0.0f);

    // duplicated peak: first one in row-major order wins
    Tensor two({1, 8, 8});
    two.at(0, 2, 5) = 1.0f;
    two.at(0, 6, 1) = 1.0f;
    Tensor j1 = evalkit::extract_joints(two, 32, 32);  // scale 4
    CHECK(j1.at(0, 0) == Approx(5 * 4.0f));
    CHECK(j1.at(0, 1) == Approx(2 * 4.0f));

    // grid-aligned Gaussian: recovered exactly (symmetric neighbors)
    Tensor joints({1, 1, 2});
    joints.at(0, 0, 0) = 24.0f;  // maps to heat cell 12 at 64 -> 32
    joints.at(0, 0, 1) = 40.0f;  // heat cell 20
    Tensor hm = skelgen::rasterize_heatmaps(joints, 64, 64, 32, 32, 1.5f);
    Tensor maps({1, 32, 32});
    std::copy(hm.ptr(), hm.ptr() + 32 * 32, maps.ptr());
    Tensor rec = evalkit::extract_joints(maps, 64, 64);
    CHECK(rec.at(0, 0) == Approx(24.0f).epsilon(1e-5));
    CHECK(rec.at(0, 1) == Approx(40.0f).epsilon(1e-5));

    CHECK_THROWS_AS(evalkit::extract_joints(Tensor({8, 8}), 64, 64), std::invalid_argument);
    CHECK_THROWS_AS(evalkit::extract_joints(flat, 0, 64), std::invalid_argument);
}

TEST_CASE("extract_joints: rasterize round trip within 1 pixel over 1000 random joints") {
    Rng rng(202);
    const int N = 1000;
    Tensor joints({N, 1, 2});
    for (int i = 0; i < N; ++i) {
        // interior margin keeps the full quadratic stencil inside the map
        joints.at(i, 0, 0) = rng.uniform(6.0f, 58.0f);
        joints.at(i, 0, 1) = rng.uniform(6.0f, 58.0f);
    }
    Tensor hm = skelgen::rasterize_heatmaps(joints, 64, 64, 32, 32, 1.5f);
    double worst = 0.0, sum = 0.0;
    for (int i = 0; i < N; ++i) {
        Tensor one({1, 32, 32});
        std::copy(hm.ptr() + (int64_t)i * 32 * 32, hm.ptr() + (int64_t)(i + 1) * 32 * 32,
                  one.ptr());
        Tensor rec = evalkit::extract_joints(one, 64, 64);
        double ex = rec.at(0, 0) - joints.at(i, 0, 0);
        double ey = rec.at(0, 1) - joints.at(i, 0, 1);
        double err = std::hypot(ex, ey);
        worst = std::max(worst, err);
        sum += err;
    }
    CHECK(worst <= 1.0);       // source-image pixels
    CHECK(sum / N <= 0.25);    // typical error far below the bound
}

TEST_CASE("pck: hand case 0.5, boundary inclusion, degenerate box, infinity") {
    Tensor gt({2, 2}), pred({2, 2});
    gt.at(0, 0) = 0;
    gt.at(0, 1) = 0;
    gt.at(1, 0) = 10;
    gt.at(1, 1) = 0;  // bbox diagonal 10
    pred.at(0, 0) = 0;
    pred.at(0, 1) = 1;  // dist 1   <= 1.5
    pred.at(1, 0) = 10;
    pred.at(1, 1) = 3;  // dist 3   >  1.5
    CHECK(evalkit::pck(pred, gt, 0.15) == Approx(0.5));

    // exactly on the threshold counts as correct
    pred.at(1, 1) = 1.5f;
    CHECK(evalkit::pck(pred, gt, 0.15) == Approx(1.0));

    // degenerate single-point box: only exact hits
    Tensor g1({2, 2}), p1({2, 2});
    for (int j = 0; j < 2; ++j) {
        g1.at(j, 0) = 5;
        g1.at(j, 1) = 5;
        p1.at(j, 0) = 5;
        p1.at(j, 1) = 5;
    }
    CHECK(evalkit::pck(p1, g1, 0.5) == Approx(1.0));
    p1.at(1, 0) = 5.001f;
    CHECK(evalkit::pck(p1, g1, 0.5) == Approx(0.5));

    // predictions at infinity never land
    Tensor pinf({2, 2});
    for (int i = 0; i < 4; ++i) pinf.data[(size_t)i] = std::numeric_limits<float>::infinity();
    CHECK(evalkit::pck(pinf, gt, 0.15) == Approx(0.0));

    CHECK_THROWS_AS(evalkit::pck(Tensor({0, 2}), Tensor({0, 2}), 0.1), std::invalid_argument);
    CHECK_THROWS_AS(evalkit::pck(Tensor({3, 2}), gt, 0.1), std::invalid_argument);
}
