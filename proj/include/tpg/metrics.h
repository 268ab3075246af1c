#ifndef TPG_METRICS_H
#define TPG_METRICS_H

#include "tpg/tensor.h"

#include <vector>

namespace tpg {

// 10 log10(peak^2 / MSE); identical images return +inf (excluded from means).
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

// Mean local SSIM over valid 11x11 windows, Gaussian weighted (sigma 1.5),
// K1 = 0.01, K2 = 0.03. Multi-channel inputs average the per-channel values.
double ssim(const Tensor& a, const Tensor& b, double peak = 1.0);

// Mean that skips non-finite entries (the +inf PSNR sentinel).
double finite_mean(const std::vector<double>& values);

} // namespace tpg

#endif
