// Compares the serial reference kernels against the OpenMP versions on the
// convolution shapes the networks actually run.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "metapix/kernels.hpp"

using namespace metapix;
using Clock = std::chrono::steady_clock;

namespace {

struct Case {
    int b, ci, h, w, co, stride;
};

template <class F>
double time_ms(F&& f, int reps) {
    f();  // warmup
    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) f();
    auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<float> random_vec(long n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = float(rng.uniform(-1.0, 1.0));
    return v;
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP enabled, max threads = %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP; parallel variants run serially\n");
#endif
    std::printf("%-26s %10s %10s %8s %8s\n", "kernel", "serial ms", "omp ms", "speedup", "equal");

    const Case cases[] = {
        {1, 8, 64, 64, 8, 1},   {1, 8, 32, 32, 16, 1}, {1, 16, 16, 16, 32, 1},
        {1, 32, 8, 8, 32, 1},   {1, 8, 64, 64, 8, 2},  {1, 16, 32, 32, 32, 2},
    };

    for (const auto& c : cases) {
        const int ho = kernels::conv_out_dim(c.h, c.stride), wo = kernels::conv_out_dim(c.w, c.stride);
        auto x = random_vec(long(c.b) * c.ci * c.h * c.w, 1);
        auto w = random_vec(long(c.co) * c.ci * 9, 2);
        auto g = random_vec(long(c.b) * c.co * ho * wo, 3);
        std::vector<float> y1(g.size()), y2(g.size());
        std::vector<float> dx1(x.size()), dx2(x.size());
        std::vector<float> dw1(w.size()), dw2(w.size());
        const int reps = 50;

        char label[64];
        std::snprintf(label, sizeof label, "conv %dx%dx%d->%d s%d", c.ci, c.h, c.w, c.co, c.stride);

        double ts = time_ms([&] { kernels::conv2d_fwd_serial(x.data(), w.data(), y1.data(), c.b, c.ci, c.h, c.w, c.co, c.stride); }, reps);
        double tp = time_ms([&] { kernels::conv2d_fwd_parallel(x.data(), w.data(), y2.data(), c.b, c.ci, c.h, c.w, c.co, c.stride); }, reps);
        bool eq = std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(float)) == 0;
        std::printf("%-26s %10.3f %10.3f %7.2fx %8s\n", (std::string(label) + " fwd").c_str(), ts, tp, ts / tp, eq ? "yes" : "NO");

        ts = time_ms([&] { kernels::conv2d_dx_serial(g.data(), w.data(), dx1.data(), c.b, c.ci, c.h, c.w, c.co, c.stride); }, reps);
        tp = time_ms([&] { kernels::conv2d_dx_parallel(g.data(), w.data(), dx2.data(), c.b, c.ci, c.h, c.w, c.co, c.stride); }, reps);
        eq = std::memcmp(dx1.data(), dx2.data(), dx1.size() * sizeof(float)) == 0;
        std::printf("%-26s %10.3f %10.3f %7.2fx %8s\n", (std::string(label) + " dx").c_str(), ts, tp, ts / tp, eq ? "yes" : "NO");

        ts = time_ms([&] { kernels::conv2d_dw_serial(g.data(), x.data(), dw1.data(), c.b, c.ci, c.h, c.w, c.co, c.stride); }, reps);
        tp = time_ms([&] { kernels::conv2d_dw_parallel(g.data(), x.data(), dw2.data(), c.b, c.ci, c.h, c.w, c.co, c.stride); }, reps);
        eq = std::memcmp(dw1.data(), dw2.data(), dw1.size() * sizeof(float)) == 0;
        std::printf("%-26s %10.3f %10.3f %7.2fx %8s\n", (std::string(label) + " dw").c_str(), ts, tp, ts / tp, eq ? "yes" : "NO");
    }
    return 0;
}
