#ifndef TPG_SDE_H
#define TPG_SDE_H

#include "tpg/rng.h"
#include "tpg/tensor.h"

#include <functional>
#include <string>
#include <vector>

namespace tpg {

// Mean-reverting forward process dx = theta_t (mu - x) dt + sigma_t dw on a
// uniform grid over [0,1]. Coefficients keep sigma_t^2 / theta_t == 2 lambda^2
// so the time-t marginal stays Gaussian in closed form.
struct SdeSchedule {
    int T = 100;
    double lambda = 50.0 / 255.0;
    double dt = 0.01;
    std::vector<double> theta;     // theta[0] unused, theta[1..T]
    std::vector<double> sigma;     // sigma[t] = sqrt(2 lambda^2 theta[t])
    std::vector<double> theta_bar; // theta_bar[0] = 0, cumulative sum of theta*dt

    // constant theta chosen so theta_bar[T] == theta_bar_total
    static SdeSchedule constant(int T, double lambda, double theta_bar_total = 9.0);
    // theta ramps as 1 - cos(pi t / T), normalized to the same total
    static SdeSchedule cosine(int T, double lambda, double theta_bar_total = 9.0);
    static SdeSchedule from_name(const std::string& name, int T, double lambda, double theta_bar_total);

    double mean_coef(int t) const { return std::exp(-theta_bar[static_cast<size_t>(t)]); }
    double variance(int t) const {
        return lambda * lambda * (1.0 - std::exp(-2.0 * theta_bar[static_cast<size_t>(t)]));
    }
    void validate_t(int t, int t_min = 0) const;
};

struct Marginal {
    Tensor mean;
    double var = 0.0;
};

// m_t = mu + (x0 - mu) e^{-theta_bar_t},  v_t = lambda^2 (1 - e^{-2 theta_bar_t})
Marginal marginal(const SdeSchedule& sched, const Tensor& x0, const Tensor& mu, int t);

// x_t = m_t + sqrt(v_t) eps, eps ~ N(0, I). Returns (x_t, eps).
std::pair<Tensor, Tensor> sample_forward(const SdeSchedule& sched, const Tensor& x0, const Tensor& mu,
                                         int t, Rng& rng);

// grad_x log p_t(x) = -(x_t - m_t) / v_t; requires t >= 1
Tensor analytic_score(const SdeSchedule& sched, const Tensor& x_t, const Tensor& x0, const Tensor& mu, int t);

// noise prediction -> score: s = -eps / sqrt(v_t)
Tensor eps_to_score(const SdeSchedule& sched, const Tensor& eps_hat, int t);

// One Euler-Maruyama step of the reverse-time SDE from time t to t - dt.
// stochastic=false drops the diffusion term (regression-test variant).
Tensor reverse_step(const SdeSchedule& sched, const Tensor& x_t, const Tensor& mu, int t,
                    const Tensor& score, Rng& rng, bool stochastic);

// Full reverse pass driven by a score callback s(x_t, t).
using ScoreFn = std::function<Tensor(const Tensor& x_t, int t)>;
Tensor reverse_integrate(const SdeSchedule& sched, Tensor x_start, const Tensor& mu,
                         const ScoreFn& score_fn, Rng& rng, bool stochastic);

// Restoration: start at x_T ~ N(mu, v_T) and integrate the reverse SDE with
// the score derived from a noise-prediction callback eps(x_t, t).
//
// With clip_denoised set, the implied x0 estimate is clamped to the image
// range before the noise prediction is reconstructed. Elements the clamp
// does not touch pass through bit-identically; elements it does touch stop
// the reverse drift from amplifying out-of-distribution score errors.
struct RestoreOptions {
    bool stochastic = false;
    bool clip_denoised = true;
    double clip_lo = 0.0;
    double clip_hi = 1.0;
};

using EpsFn = std::function<Tensor(const Tensor& x_t, int t)>;
Tensor sample_restore(const SdeSchedule& sched, const Tensor& mu, const EpsFn& eps_fn, Rng& rng,
                      const RestoreOptions& opts = {});
Tensor sample_restore(const SdeSchedule& sched, const Tensor& mu, const EpsFn& eps_fn, Rng& rng,
                      bool stochastic);

} // namespace tpg

#endif
