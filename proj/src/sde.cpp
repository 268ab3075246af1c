#include "tpg/sde.h"

#include <cmath>
#include <stdexcept>

namespace tpg {

namespace {

SdeSchedule finalize(int T, double lambda, std::vector<double> theta) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (lambda <= 0.0) throw std::invalid_argument("schedule needs lambda > 0");
    SdeSchedule s;
    s.T = T;
    s.lambda = lambda;
    s.dt = 1.0 / static_cast<double>(T);
    s.theta = std::move(theta);
    s.sigma.assign(static_cast<size_t>(T) + 1, 0.0);
    s.theta_bar.assign(static_cast<size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        const double th = s.theta[static_cast<size_t>(t)];
        if (th <= 0.0) throw std::invalid_argument("theta must be positive at every step");
        s.sigma[static_cast<size_t>(t)] = std::sqrt(2.0 * lambda * lambda * th);
        s.theta_bar[static_cast<size_t>(t)] = s.theta_bar[static_cast<size_t>(t) - 1] + th * s.dt;
    }
    return s;
}

} // namespace

SdeSchedule SdeSchedule::constant(int T, double lambda, double theta_bar_total) {
    std::vector<double> theta(static_cast<size_t>(T) + 1, theta_bar_total);
    theta[0] = 0.0;
    return finalize(T, lambda, std::move(theta));
}

SdeSchedule SdeSchedule::cosine(int T, double lambda, double theta_bar_total) {
    // ramp 1 - cos(pi t / T), strictly positive for t >= 1, normalized so the
    // cumulative integral hits theta_bar_total
    std::vector<double> theta(static_cast<size_t>(T) + 1, 0.0);
    double total = 0.0;
    for (int t = 1; t <= T; ++t) {
        const double v = 1.0 - std::cos(3.14159265358979323846 * static_cast<double>(t) / static_cast<double>(T)) + 1e-3;
        theta[static_cast<size_t>(t)] = v;
        total += v / static_cast<double>(T);
    }
    for (int t = 1; t <= T; ++t) theta[static_cast<size_t>(t)] *= theta_bar_total / total;
    return finalize(T, lambda, std::move(theta));
}

SdeSchedule SdeSchedule::from_name(const std::string& name, int T, double lambda, double theta_bar_total) {
    if (name == "constant") return constant(T, lambda, theta_bar_total);
    if (name == "cosine") return cosine(T, lambda, theta_bar_total);
    throw std::invalid_argument("unknown schedule '" + name + "' (expected constant|cosine)");
}

void SdeSchedule::validate_t(int t, int t_min) const {
    if (t < t_min || t > T)
        throw std::invalid_argument("time step " + std::to_string(t) + " outside [" + std::to_string(t_min) +
                                    ", " + std::to_string(T) + "]");
}

Marginal marginal(const SdeSchedule& sched, const Tensor& x0, const Tensor& mu, int t) {
    sched.validate_t(t);
    if (x0.shape() != mu.shape())
        throw std::invalid_argument("marginal: x0 " + shape_str(x0.shape()) + " vs mu " + shape_str(mu.shape()));
    // affine form c*x0 + (1-c)*mu is exact at both endpoints (t=0 and c->0)
    const double c = sched.mean_coef(t);
    Marginal m;
    m.mean = Tensor::zeros(x0.shape());
    for (int64_t i = 0; i < x0.numel(); ++i)
        m.mean.data()[i] = c * x0.data()[i] + (1.0 - c) * mu.data()[i];
    m.var = sched.variance(t);
    return m;
}

std::pair<Tensor, Tensor> sample_forward(const SdeSchedule& sched, const Tensor& x0, const Tensor& mu,
                                         int t, Rng& rng) {
    Marginal m = marginal(sched, x0, mu, t);
    Tensor eps = Tensor::zeros(x0.shape());
    if (t == 0) return {m.mean, eps};
    const double sd = std::sqrt(m.var);
    Tensor x_t = Tensor::zeros(x0.shape());
    for (int64_t i = 0; i < x0.numel(); ++i) {
        const double e = rng.normal();
        eps.data()[i] = e;
        x_t.data()[i] = m.mean.data()[i] + sd * e;
    }
    return {x_t, eps};
}

Tensor analytic_score(const SdeSchedule& sched, const Tensor& x_t, const Tensor& x0, const Tensor& mu, int t) {
    sched.validate_t(t, 1); // v_0 = 0 is degenerate
    Marginal m = marginal(sched, x0, mu, t);
    Tensor s = Tensor::zeros(x_t.shape());
    const double inv_v = 1.0 / m.var;
    for (int64_t i = 0; i < x_t.numel(); ++i)
        s.data()[i] = -(x_t.data()[i] - m.mean.data()[i]) * inv_v;
    return s;
}

Tensor eps_to_score(const SdeSchedule& sched, const Tensor& eps_hat, int t) {
    sched.validate_t(t, 1);
    return scale(eps_hat, -1.0 / std::sqrt(sched.variance(t)));
}

Tensor reverse_step(const SdeSchedule& sched, const Tensor& x_t, const Tensor& mu, int t,
                    const Tensor& score, Rng& rng, bool stochastic) {
    sched.validate_t(t, 1);
    if (x_t.shape() != mu.shape() || x_t.shape() != score.shape())
        throw std::invalid_argument("reverse_step shape mismatch");
    const double th = sched.theta[static_cast<size_t>(t)];
    const double sg = sched.sigma[static_cast<size_t>(t)];
    const double noise_sd = stochastic ? sg * std::sqrt(sched.dt) : 0.0;
    Tensor out = Tensor::zeros(x_t.shape());
    for (int64_t i = 0; i < x_t.numel(); ++i) {
        const double drift = th * (mu.data()[i] - x_t.data()[i]) - sg * sg * score.data()[i];
        double v = x_t.data()[i] - drift * sched.dt;
        if (stochastic) v += noise_sd * rng.normal();
        out.data()[i] = v;
    }
    return out;
}

Tensor reverse_integrate(const SdeSchedule& sched, Tensor x_start, const Tensor& mu,
                         const ScoreFn& score_fn, Rng& rng, bool stochastic) {
    Tensor x = std::move(x_start);
    for (int t = sched.T; t >= 1; --t) {
        Tensor s = score_fn(x, t);
        x = reverse_step(sched, x, mu, t, s, rng, stochastic);
    }
    return x;
}

Tensor sample_restore(const SdeSchedule& sched, const Tensor& mu, const EpsFn& eps_fn, Rng& rng,
                      const RestoreOptions& opts) {
    const double sd = std::sqrt(sched.variance(sched.T));
    Tensor x = Tensor::zeros(mu.shape());
    for (int64_t i = 0; i < mu.numel(); ++i) x.data()[i] = mu.data()[i] + sd * rng.normal();
    x = reverse_integrate(
        sched, std::move(x), mu,
        [&](const Tensor& xt, int t) {
            Tensor eps_hat = eps_fn(xt, t);
            if (opts.clip_denoised) {
                const double c = sched.mean_coef(t);
                const double sv = std::sqrt(sched.variance(t));
                Tensor adjusted = Tensor::from(eps_hat.shape(), eps_hat.vec());
                for (int64_t i = 0; i < xt.numel(); ++i) {
                    const double x0_hat =
                        (xt.data()[i] - (1.0 - c) * mu.data()[i] - sv * eps_hat.data()[i]) / c;
                    const double clipped = std::clamp(x0_hat, opts.clip_lo, opts.clip_hi);
                    if (clipped != x0_hat)
                        adjusted.data()[i] = (xt.data()[i] - c * clipped - (1.0 - c) * mu.data()[i]) / sv;
                }
                eps_hat = adjusted;
            }
            return eps_to_score(sched, eps_hat, t);
        },
        rng, opts.stochastic);
    if (opts.clip_denoised)
        for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = std::clamp(x.data()[i], opts.clip_lo, opts.clip_hi);
    return x;
}

Tensor sample_restore(const SdeSchedule& sched, const Tensor& mu, const EpsFn& eps_fn, Rng& rng, bool stochastic) {
    RestoreOptions opts;
    opts.stochastic = stochastic;
    return sample_restore(sched, mu, eps_fn, rng, opts);
}

} // namespace tpg
