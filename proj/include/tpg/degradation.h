#ifndef TPG_DEGRADATION_H
#define TPG_DEGRADATION_H

#include "tpg/nn.h"
#include "tpg/tensor.h"

#include <string>
#include <vector>

namespace tpg {

// Conv trunk + global pooling -> F_g, plus a classifier head that is used
// only by the training loss. The inference path never reads the head.
struct DegradationEncoder {
    Conv2d c1, c2, c3; // strided trunk
    Linear classifier; // dim -> n_classes, training only
    int64_t dim = 64;
    int64_t n_classes = 5;

    DegradationEncoder() = default;
    DegradationEncoder(int64_t img_channels, int64_t dim, int64_t n_classes, Rng& rng);

    Tensor features(const Tensor& x_lq) const; // z_deg [dim]
    Tensor logits(const Tensor& x_lq) const;   // [n_classes]

    void collect_trunk(const std::string& prefix, ParamStore& store) const;
    void collect(const std::string& prefix, ParamStore& store) const;
};

// Label-smoothed cross entropy, q = (1-eps) one_hot + eps/N, averaged over
// the batch. logits [B,N] (or [N] with a single label).
Tensor deg_class_loss(const Tensor& logits, const std::vector<int>& labels, double eps = 0.01);

// Sinusoidal step embedding plus a degradation-conditioned additive term:
// t' = psi(tau) + phi(softmax(W_d z_deg) mixed over a bank of prompt rows).
// phi's output layer starts at zero, so t' == psi(tau) exactly at init.
struct TimeModulator {
    Tensor wd;      // [deg_dim, slots]
    Tensor prompts; // [slots, t_dim]
    Linear fc1;     // t_dim -> t_dim
    Linear fc2;     // t_dim -> t_dim, zero-init
    int64_t t_dim = 128;
    int64_t slots = 8;

    TimeModulator() = default;
    TimeModulator(int64_t deg_dim, int64_t t_dim, int64_t slots, Rng& rng);

    static Tensor time_embedding(int tau, int64_t t_dim); // psi
    Tensor slot_weights(const Tensor& z_deg) const;       // softmax(W_d z_deg) [slots]
    Tensor mixture(const Tensor& z_deg) const;            // weights x prompts [t_dim]
    Tensor modulate(int tau, const Tensor& z_deg) const;  // t' [t_dim]

    void collect(const std::string& prefix, ParamStore& store) const;
};

struct DegradationPrior {
    DegradationEncoder encoder;
    TimeModulator modulator;

    DegradationPrior() = default;
    DegradationPrior(int64_t img_channels, int64_t dim, int64_t n_classes, int64_t t_dim, int64_t slots,
                     uint64_t seed);

    Tensor extract(const Tensor& x_lq) const { return encoder.features(x_lq); }
    void collect(const std::string& prefix, ParamStore& store) const;
};

} // namespace tpg

#endif
