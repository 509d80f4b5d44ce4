#pragma once

#include "ensdown/grid.hpp"
#include "ensdown/model.hpp"
#include "ensdown/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testing {

inline ensdown::Tensor random_tensor(const ensdown::Shape& shape, std::uint64_t seed, double lo = -1.0,
                                     double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    ensdown::Tensor t(shape);
    for (auto& v : t.data()) v = u(rng);
    return t;
}

// Direct loop cross-correlation with zero padding, used as an oracle.
inline ensdown::Tensor naive_conv2d(const ensdown::Tensor& x, const ensdown::Tensor& k, const ensdown::Tensor& b) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
    const long ph = static_cast<long>(KH / 2), pw = static_cast<long>(KW / 2);
    ensdown::Tensor out(ensdown::Shape{N, O, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t u = 0; u < KH; ++u)
                            for (std::size_t v = 0; v < KW; ++v) {
                                const long y = static_cast<long>(i) + static_cast<long>(u) - ph;
                                const long z = static_cast<long>(j) + static_cast<long>(v) - pw;
                                if (y < 0 || z < 0 || y >= static_cast<long>(H) || z >= static_cast<long>(W)) continue;
                                acc += x[((n * C + c) * H + y) * W + z] * k[((o * C + c) * KH + u) * KW + v];
                            }
                    out[((n * O + o) * H + i) * W + j] = acc;
                }
    return out;
}

// Daily field over whole years with values from f(t, c, h, w).
inline ensdown::GridField make_field(int start_year, int end_year, std::size_t C, std::size_t H, std::size_t W,
                                     const std::function<double(std::size_t, std::size_t, std::size_t, std::size_t)>& f) {
    ensdown::GridField g;
    g.time = ensdown::daily_calendar(start_year, end_year);
    const std::size_t T = g.time.size();
    g.values = ensdown::Tensor(ensdown::Shape{T, C, H, W});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) g.values[((t * C + c) * H + h) * W + w] = f(t, c, h, w);
    for (std::size_t c = 0; c < C; ++c) {
        g.variables.push_back("v" + std::to_string(c));
        g.units.push_back("1");
    }
    g.lat = ensdown::cell_centers(25.0, 55.0, H);
    g.lon = ensdown::cell_centers(-135.0, -100.0, W);
    return g;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("ensdown_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// y_g = a_g . x + b_g + sigma * eps on a 2x2 coarse grid with 2 channels.
struct LinearGaussian {
    ensdown::GridField x;
    ensdown::GridField y;
    double sigma = 0.5;
};

inline LinearGaussian linear_gaussian(int years, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    LinearGaussian d;
    d.x = make_field(1980, 1980 + years - 1, 2, 2, 2, [&](auto, auto, auto, auto) { return nd(rng); });
    std::vector<double> a(4 * 8), b(4);
    for (auto& v : a) v = 0.5 * nd(rng);
    for (auto& v : b) v = nd(rng);
    const std::size_t T = d.x.steps();
    d.y = make_field(1980, 1980 + years - 1, 1, 2, 2, [](auto, auto, auto, auto) { return 0.0; });
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t g = 0; g < 4; ++g) {
            double s = b[g];
            for (std::size_t f = 0; f < 8; ++f) s += a[g * 8 + f] * d.x.values[t * 8 + f];
            d.y.values[t * 4 + g] = s + d.sigma * nd(rng);
        }
    }
    return d;
}

inline ensdown::DeepESDConfig small_model(std::size_t channels, std::size_t h, std::size_t w, std::size_t g) {
    ensdown::DeepESDConfig c;
    c.input_channels = channels;
    c.coarse_height = h;
    c.coarse_width = w;
    c.conv_channels = {8, 8, 8};
    c.n_output_gridpoints = g;
    return c;
}

} // namespace testing
