#ifndef TPG_NN_H
#define TPG_NN_H

#include "tpg/rng.h"
#include "tpg/tensor.h"

#include <map>
#include <string>
#include <vector>

namespace tpg {

// Ordered named parameter registry shared by the optimizer, checkpoints and
// the gradient checker. Iteration order is registration order (determinism).
class ParamStore {
public:
    void add(const std::string& name, Tensor t);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<Tensor> tensors() const;
    size_t size() const { return items_.size(); }
    int64_t numel() const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, size_t> index_;
};

// ---- init -------------------------------------------------------------------

Tensor kaiming_init(const Shape& shape, int64_t fan_in, Rng& rng);
Tensor normal_init(const Shape& shape, double stddev, Rng& rng);

// ---- layers -----------------------------------------------------------------

struct Linear {
    Tensor w; // [in, out]
    Tensor b; // [out]

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool zero_init = false);
    Tensor apply(const Tensor& x) const; // x [B,in] or [in]
    void collect(const std::string& prefix, ParamStore& store) const;
};

struct Conv2d {
    Tensor w; // [Co, Ci, k, k]
    Tensor b; // [Co]
    int stride = 1;
    int padding = 0;

    Conv2d() = default;
    Conv2d(int64_t in_ch, int64_t out_ch, int k, int stride, int padding, Rng& rng, bool zero_init = false);
    Tensor apply(const Tensor& x) const;
    void collect(const std::string& prefix, ParamStore& store) const;
};

struct GroupNorm {
    Tensor weight; // [C], ones
    Tensor bias;   // [C], zeros
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(int64_t channels, int groups_wanted);
    Tensor apply(const Tensor& x) const;
    void collect(const std::string& prefix, ParamStore& store) const;
};

// Largest divisor of `channels` that is <= wanted.
int fit_groups(int64_t channels, int wanted);

// ---- attention core -----------------------------------------------------------

// softmax(Q K^T / sqrt(d)) V with Q [L,d], K [M,d], V [M,dv].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// ---- optimizer ------------------------------------------------------------------

// Adam with decoupled weight decay and optional cosine learning-rate decay.
class AdamW {
public:
    struct Options {
        double lr = 2e-5;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
        bool cosine_decay = false;
        int64_t total_steps = 0; // required when cosine_decay
    };

    AdamW(std::vector<Tensor> params, Options opt);
    void step();
    void zero_grad();
    int64_t steps_taken() const { return t_; }
    double current_lr() const;

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    Options opt_;
    int64_t t_ = 0;
};

} // namespace tpg

#endif
