// Compares the serial reference kernels against the OpenMP/Eigen path and
// reports sustained throughput, used to size training budgets for this host.
#include "imanim/core/kernels.hpp"
#include "imanim/core/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

using namespace imanim;

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

template <typename F>
double time_best(F&& f, int reps) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        double t0 = now_s();
        f();
        best = std::min(best, now_s() - t0);
    }
    return best;
}

void fill(std::vector<float>& v, Rng& rng) {
    for (auto& x : v) x = (float)rng.uniform(-1.0, 1.0);
}

}  // namespace

int main() {
    Rng rng(7);

    std::printf("%-28s %10s %10s %8s %10s\n", "kernel", "ref_ms", "par_ms", "speedup",
                "par_gflops");

    auto bench_gemm = [&](int m, int n, int k) {
        std::vector<float> a((size_t)m * k), b((size_t)k * n), c1((size_t)m * n),
            c2((size_t)m * n);
        fill(a, rng);
        fill(b, rng);
        double tr = time_best(
            [&] { kernels::ref::gemm(false, false, m, n, k, a.data(), b.data(), c1.data(), 0.0f); },
            3);
        double tp = time_best(
            [&] { kernels::par::gemm(false, false, m, n, k, a.data(), b.data(), c2.data(), 0.0f); },
            5);
        double max_err = 0.0;
        for (size_t i = 0; i < c1.size(); ++i)
            max_err = std::max(max_err, (double)std::fabs(c1[i] - c2[i]));
        double flops = 2.0 * m * n * k;
        char name[64];
        std::snprintf(name, sizeof(name), "gemm %dx%dx%d", m, n, k);
        std::printf("%-28s %10.2f %10.2f %8.1fx %10.2f   (max |diff| %.2e)\n", name, tr * 1e3,
                    tp * 1e3, tr / tp, flops / tp / 1e9, max_err);
    };

    bench_gemm(512, 128, 128);
    bench_gemm(512, 512, 128);
    bench_gemm(1024, 512, 512);
    bench_gemm(832, 384, 128);

    {
        int rows = 4096, cols = 512;
        std::vector<float> x1((size_t)rows * cols), x2;
        fill(x1, rng);
        x2 = x1;
        double tr = time_best([&] { kernels::ref::softmax_rows(x1.data(), rows, cols); }, 3);
        double tp = time_best([&] { kernels::par::softmax_rows(x2.data(), rows, cols); }, 5);
        std::printf("%-28s %10.2f %10.2f %8.1fx\n", "softmax 4096x512", tr * 1e3, tp * 1e3,
                    tr / tp);
    }
    {
        int rows = 4096, cols = 128;
        std::vector<float> x((size_t)rows * cols), g(cols, 1.0f), b(cols, 0.0f),
            y1((size_t)rows * cols), y2((size_t)rows * cols);
        fill(x, rng);
        double tr = time_best(
            [&] {
                kernels::ref::layer_norm(x.data(), g.data(), b.data(), y1.data(), rows, cols,
                                         1e-5f);
            },
            3);
        double tp = time_best(
            [&] {
                kernels::par::layer_norm(x.data(), g.data(), b.data(), y2.data(), rows, cols,
                                         1e-5f);
            },
            5);
        std::printf("%-28s %10.2f %10.2f %8.1fx\n", "layer_norm 4096x128", tr * 1e3, tp * 1e3,
                    tr / tp);
    }
    {
        int64_t n = 1 << 22;
        std::vector<float> x((size_t)n), y1((size_t)n), y2((size_t)n);
        fill(x, rng);
        double tr = time_best([&] { kernels::ref::gelu(x.data(), y1.data(), n); }, 3);
        double tp = time_best([&] { kernels::par::gelu(x.data(), y2.data(), n); }, 5);
        std::printf("%-28s %10.2f %10.2f %8.1fx\n", "gelu 4M", tr * 1e3, tp * 1e3, tr / tp);
    }
    {
        int l = 512, d = 32;
        std::vector<float> q((size_t)l * d), k_((size_t)l * d), v((size_t)l * d),
            p1((size_t)l * l), p2((size_t)l * l), o1((size_t)l * d), o2((size_t)l * d);
        fill(q, rng);
        fill(k_, rng);
        fill(v, rng);
        double tr = time_best(
            [&] {
                kernels::ref::attention_head(q.data(), k_.data(), v.data(), p1.data(), o1.data(),
                                             l, l, d);
            },
            3);
        double tp = time_best(
            [&] {
                kernels::par::attention_head(q.data(), k_.data(), v.data(), p2.data(), o2.data(),
                                             l, l, d);
            },
            5);
        std::printf("%-28s %10.2f %10.2f %8.1fx\n", "attention_head 512x32", tr * 1e3, tp * 1e3,
                    tr / tp);
    }
    return 0;
}
