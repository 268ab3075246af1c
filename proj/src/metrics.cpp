#include "tpg/metrics.h"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace tpg {

double psnr(const Tensor& a, const Tensor& b, double peak) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("psnr shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a.at(i) - b.at(i);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kWin = 11;

const std::vector<double>& gaussian_window() {
    static const std::vector<double> win = [] {
        std::vector<double> w(kWin * kWin);
        const double sigma = 1.5;
        const int r = kWin / 2;
        double total = 0.0;
        for (int y = -r; y <= r; ++y)
            for (int x = -r; x <= r; ++x) {
                const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
                w[(y + r) * kWin + (x + r)] = v;
                total += v;
            }
        for (auto& v : w) v /= total;
        return w;
    }();
    return win;
}

double ssim_channel(const double* a, const double* b, int64_t H, int64_t W, double peak) {
    const auto& win = gaussian_window();
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t y = 0; y + kWin <= H; ++y)
        for (int64_t x = 0; x + kWin <= W; ++x) {
            double ma = 0.0, mb = 0.0;
            for (int wy = 0; wy < kWin; ++wy)
                for (int wx = 0; wx < kWin; ++wx) {
                    const double g = win[wy * kWin + wx];
                    ma += g * a[(y + wy) * W + x + wx];
                    mb += g * b[(y + wy) * W + x + wx];
                }
            double va = 0.0, vb = 0.0, cov = 0.0;
            for (int wy = 0; wy < kWin; ++wy)
                for (int wx = 0; wx < kWin; ++wx) {
                    const double g = win[wy * kWin + wx];
                    const double da = a[(y + wy) * W + x + wx] - ma;
                    const double db = b[(y + wy) * W + x + wx] - mb;
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
            ++count;
        }
    return acc / static_cast<double>(count);
}

} // namespace

double ssim(const Tensor& a, const Tensor& b, double peak) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("ssim shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int64_t C = 1, H, W;
    if (a.rank() == 3) {
        C = a.dim(0);
        H = a.dim(1);
        W = a.dim(2);
    } else if (a.rank() == 2) {
        H = a.dim(0);
        W = a.dim(1);
    } else {
        throw std::invalid_argument("ssim expects [C,H,W] or [H,W], got " + shape_str(a.shape()));
    }
    if (H < kWin || W < kWin)
        throw std::invalid_argument("ssim: image " + shape_str(a.shape()) + " smaller than the 11x11 window");
    double acc = 0.0;
    for (int64_t c = 0; c < C; ++c) acc += ssim_channel(a.data() + c * H * W, b.data() + c * H * W, H, W, peak);
    return acc / static_cast<double>(C);
}

double finite_mean(const std::vector<double>& values) {
    double acc = 0.0;
    int64_t n = 0;
    for (double v : values)
        if (std::isfinite(v)) {
            acc += v;
            ++n;
        }
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

} // namespace tpg
