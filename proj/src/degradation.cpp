#include "tpg/degradation.h"

#include <cmath>
#include <stdexcept>

namespace tpg {

DegradationEncoder::DegradationEncoder(int64_t img_channels, int64_t dim_, int64_t n_classes_, Rng& rng)
    : dim(dim_), n_classes(n_classes_) {
    if (dim % 2 != 0) throw std::invalid_argument("degradation feature width must be even");
    c1 = Conv2d(img_channels, 16, 3, 1, 1, rng); // full resolution, keeps grain statistics
    c2 = Conv2d(16, 32, 3, 2, 1, rng);
    c3 = Conv2d(32, dim / 2, 3, 2, 1, rng);
    classifier = Linear(dim, n_classes, rng);
}

Tensor DegradationEncoder::features(const Tensor& x_lq) const {
    Tensor h = silu(c1.apply(x_lq));
    h = silu(c2.apply(h));
    h = silu(c3.apply(h));
    // channel-wise mean and spread; the spread carries the texture
    // statistics that separate grain-like from smoothing corruptions
    Tensor flat = reshape(h, {dim / 2, h.dim(1) * h.dim(2)});
    Tensor mu = mean_axis(flat, 1);
    Tensor var = sub(mean_axis(mul(flat, flat), 1), mul(mu, mu));
    Tensor sd = sqrt(add_scalar(var, 1e-8));
    return concat({mu, sd}, 0);
}

Tensor DegradationEncoder::logits(const Tensor& x_lq) const { return classifier.apply(features(x_lq)); }

void DegradationEncoder::collect_trunk(const std::string& prefix, ParamStore& store) const {
    c1.collect(prefix + ".c1", store);
    c2.collect(prefix + ".c2", store);
    c3.collect(prefix + ".c3", store);
}

void DegradationEncoder::collect(const std::string& prefix, ParamStore& store) const {
    collect_trunk(prefix, store);
    classifier.collect(prefix + ".cls", store);
}

Tensor deg_class_loss(const Tensor& logits0, const std::vector<int>& labels, double eps) {
    Tensor logits = logits0.rank() == 1 ? reshape(logits0, {1, logits0.dim(0)}) : logits0;
    if (logits.rank() != 2) throw std::invalid_argument("deg_class_loss expects [B,N] logits");
    const int64_t B = logits.dim(0), N = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != B)
        throw std::invalid_argument("deg_class_loss: " + std::to_string(labels.size()) + " labels for batch " +
                                    std::to_string(B));
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("deg_class_loss: eps must lie in [0,1)");
    Tensor q = Tensor::zeros({B, N});
    for (int64_t r = 0; r < B; ++r) {
        const int y = labels[static_cast<size_t>(r)];
        if (y < 0 || y >= N)
            throw std::invalid_argument("deg_class_loss: label " + std::to_string(y) + " outside [0, " +
                                        std::to_string(N) + ")");
        for (int64_t c = 0; c < N; ++c) q.data()[r * N + c] = (c == y ? 1.0 - eps : 0.0) + eps / static_cast<double>(N);
    }
    Tensor per_row = sum_axis(mul(q, log_softmax(logits, 1)), 1); // [B]
    return neg(mean(per_row));
}

TimeModulator::TimeModulator(int64_t deg_dim, int64_t t_dim_, int64_t slots_, Rng& rng)
    : t_dim(t_dim_), slots(slots_) {
    wd = kaiming_init({deg_dim, slots}, deg_dim, rng);
    prompts = normal_init({slots, t_dim}, 1.0, rng);
    fc1 = Linear(t_dim, t_dim, rng);
    fc2 = Linear(t_dim, t_dim, rng, /*zero_init=*/true);
}

Tensor TimeModulator::time_embedding(int tau, int64_t t_dim) {
    const int64_t half = t_dim / 2;
    Tensor emb = Tensor::zeros({t_dim});
    for (int64_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half - 1));
        emb.data()[i] = std::sin(tau * freq);
        emb.data()[half + i] = std::cos(tau * freq);
    }
    return emb;
}

Tensor TimeModulator::slot_weights(const Tensor& z_deg) const {
    if (z_deg.rank() != 1 || z_deg.dim(0) != wd.dim(0))
        throw std::invalid_argument("slot_weights: z_deg " + shape_str(z_deg.shape()) + " does not match projection");
    Tensor row = reshape(z_deg, {1, z_deg.dim(0)});
    return reshape(softmax(matmul(row, wd), 1), {slots});
}

Tensor TimeModulator::mixture(const Tensor& z_deg) const {
    Tensor w = reshape(slot_weights(z_deg), {1, slots});
    return reshape(matmul(w, prompts), {t_dim});
}

Tensor TimeModulator::modulate(int tau, const Tensor& z_deg) const {
    Tensor base = time_embedding(tau, t_dim);
    Tensor adj = fc2.apply(silu(fc1.apply(mixture(z_deg))));
    return add(base, adj);
}

void TimeModulator::collect(const std::string& prefix, ParamStore& store) const {
    store.add(prefix + ".wd", wd);
    store.add(prefix + ".prompts", prompts);
    fc1.collect(prefix + ".fc1", store);
    fc2.collect(prefix + ".fc2", store);
}

DegradationPrior::DegradationPrior(int64_t img_channels, int64_t dim, int64_t n_classes, int64_t t_dim,
                                   int64_t slots, uint64_t seed) {
    Rng rng(seed);
    encoder = DegradationEncoder(img_channels, dim, n_classes, rng);
    modulator = TimeModulator(dim, t_dim, slots, rng);
}

void DegradationPrior::collect(const std::string& prefix, ParamStore& store) const {
    encoder.collect(prefix + ".enc", store);
    modulator.collect(prefix + ".tmod", store);
}

} // namespace tpg
