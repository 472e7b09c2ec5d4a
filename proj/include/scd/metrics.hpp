#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "scd/tensor.hpp"

// Reconstruction metrics on [0,1] frames. Both metrics accumulate in double
// regardless of the tensor scalar so that identical inputs hit the exact
// fixed points (psnr 99, ssim 1).

namespace scd {

namespace detail {

template <class S>
void check_frame_pair(const Tensor<S>& a, const Tensor<S>& b, const char* who) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
    if (a.ndim() != 3) throw ShapeError(std::string(who) + ": expected (H x W x C) frames");
    for (const auto& t : {a, b})
        for (S v : t.data())
            if (!(double(v) >= 0.0 && double(v) <= 1.0))
                throw Error(std::string(who) + ": pixel value " + std::to_string(double(v)) +
                            " outside [0, 1]");
}

}  // namespace detail

inline constexpr double kPsnrCap = 99.0;

// 10 * log10(1 / mse) for unit dynamic range, capped at 99 dB; identical
// frames report the cap exactly.
template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_frame_pair(a, b, "psnr");
    double se = 0;
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t e = 0; e < av.size(); ++e) {
        const double d = double(av[e]) - double(bv[e]);
        se += d * d;
    }
    const double mse = se / double(av.size());
    if (mse == 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Mean SSIM over sliding Gaussian windows (11x11, sigma 1.5, k1 0.01,
// k2 0.03, L 1), averaged over valid window positions and channels. Frames
// smaller than the window fall back to the largest odd window that fits.
template <class S>
double ssim(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_frame_pair(a, b, "ssim");
    const index_t H = a.dim(0), W = a.dim(1), C = a.dim(2);

    index_t win = 11;
    if (std::min(H, W) < win) {
        win = std::min(H, W);
        if (win % 2 == 0) --win;
    }
    if (win < 1) throw ShapeError("ssim: frame too small for any window");

    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    std::vector<double> weight(static_cast<size_t>(win * win));
    {
        const double ctr = double(win - 1) / 2;
        double total = 0;
        for (index_t i = 0; i < win; ++i)
            for (index_t j = 0; j < win; ++j) {
                const double d2 = (i - ctr) * (i - ctr) + (j - ctr) * (j - ctr);
                const double w = std::exp(-d2 / (2 * sigma * sigma));
                weight[static_cast<size_t>(i * win + j)] = w;
                total += w;
            }
        for (double& w : weight) w /= total;
    }

    const auto& av = a.data();
    const auto& bv = b.data();
    double acc = 0;
    index_t count = 0;
    for (index_t ch = 0; ch < C; ++ch)
        for (index_t r0 = 0; r0 + win <= H; ++r0)
            for (index_t c0 = 0; c0 + win <= W; ++c0) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (index_t i = 0; i < win; ++i)
                    for (index_t j = 0; j < win; ++j) {
                        const double w = weight[static_cast<size_t>(i * win + j)];
                        const size_t e =
                            static_cast<size_t>(((r0 + i) * W + (c0 + j)) * C + ch);
                        const double x = double(av[e]), y = double(bv[e]);
                        mx += w * x;
                        my += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                // Evaluate numerator and denominator through identically
                // shaped expressions (products rounded to doubles first, no
                // bare a*b+c for the compiler to fuse) so that on identical
                // inputs every window ratio is exactly 1.0.
                const double px = mx * mx, py = my * my, pxy = mx * my;
                const double vx = xx - px, vy = yy - py, cov = xy - pxy;
                const double lum_n = pxy + pxy + c1, lum_d = px + py + c1;
                const double str_n = cov + cov + c2, str_d = vx + vy + c2;
                acc += (lum_n * str_n) / (lum_d * str_d);
                ++count;
            }
    return acc / double(count);
}

struct MetricRow {
    index_t seq_id = 0;
    index_t frame = 0;
    double psnr = 0;
    double ssim = 0;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "seq_id,frame,psnr,ssim\n";
    char line[128];
    for (const MetricRow& r : rows) {
        std::snprintf(line, sizeof(line), "%lld,%lld,%.6f,%.6f\n",
                      static_cast<long long>(r.seq_id), static_cast<long long>(r.frame), r.psnr,
                      r.ssim);
        out += line;
    }
    return out;
}

}  // namespace scd
