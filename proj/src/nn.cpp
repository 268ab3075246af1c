#include "tpg/nn.h"

#include <cmath>
#include <stdexcept>

namespace tpg {

// ---- ParamStore ---------------------------------------------------------------

void ParamStore::add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
}

Tensor* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
}

const Tensor* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
}

std::vector<Tensor> ParamStore::tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [name, t] : items_) out.push_back(t);
    return out;
}

int64_t ParamStore::numel() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

// ---- init -----------------------------------------------------------------------

Tensor kaiming_init(const Shape& shape, int64_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    return normal_init(shape, stddev, rng);
}

Tensor normal_init(const Shape& shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(shape, true);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, stddev);
    return t;
}

// ---- Linear ---------------------------------------------------------------------

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool zero_init) {
    w = zero_init ? Tensor::zeros({in, out}, true) : kaiming_init({in, out}, in, rng);
    b = Tensor::zeros({out}, true);
}

Tensor Linear::apply(const Tensor& x) const {
    if (x.rank() == 1) {
        Tensor row = reshape(x, {1, x.dim(0)});
        return reshape(add(matmul(row, w), b), {w.dim(1)});
    }
    return add(matmul(x, w), b);
}

void Linear::collect(const std::string& prefix, ParamStore& store) const {
    store.add(prefix + ".w", w);
    store.add(prefix + ".b", b);
}

// ---- Conv2d ---------------------------------------------------------------------

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int k, int stride_, int padding_, Rng& rng, bool zero_init)
    : stride(stride_), padding(padding_) {
    const int64_t fan_in = in_ch * k * k;
    w = zero_init ? Tensor::zeros({out_ch, in_ch, k, k}, true) : kaiming_init({out_ch, in_ch, k, k}, fan_in, rng);
    b = Tensor::zeros({out_ch}, true);
}

Tensor Conv2d::apply(const Tensor& x) const { return conv2d(x, w, b, stride, padding); }

void Conv2d::collect(const std::string& prefix, ParamStore& store) const {
    store.add(prefix + ".w", w);
    store.add(prefix + ".b", b);
}

// ---- GroupNorm ------------------------------------------------------------------

int fit_groups(int64_t channels, int wanted) {
    int g = std::min<int64_t>(wanted, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
}

GroupNorm::GroupNorm(int64_t channels, int groups_wanted) {
    groups = fit_groups(channels, groups_wanted);
    weight = Tensor::full({channels}, 1.0, true);
    bias = Tensor::zeros({channels}, true);
}

Tensor GroupNorm::apply(const Tensor& x) const { return group_norm(x, groups, weight, bias); }

void GroupNorm::collect(const std::string& prefix, ParamStore& store) const {
    store.add(prefix + ".w", weight);
    store.add(prefix + ".b", bias);
}

// ---- attention -------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw std::invalid_argument("attention expects rank-2 Q/K/V");
    if (q.dim(1) != k.dim(1))
        throw std::invalid_argument("attention width mismatch: Q " + shape_str(q.shape()) + " K " + shape_str(k.shape()));
    if (k.dim(0) != v.dim(0))
        throw std::invalid_argument("attention K/V row mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d); // [L, M]
    Tensor weights = softmax(scores, 1);
    return matmul(weights, v);
}

// ---- AdamW ----------------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, Options opt) : params_(std::move(params)), opt_(opt) {
    if (opt_.cosine_decay && opt_.total_steps <= 0)
        throw std::invalid_argument("cosine decay requires total_steps");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
}

double AdamW::current_lr() const {
    if (!opt_.cosine_decay) return opt_.lr;
    const double frac = std::min(1.0, static_cast<double>(t_) / static_cast<double>(opt_.total_steps));
    return opt_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

void AdamW::step() {
    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (p.grad().empty()) continue;
        const double* g = p.grad().data();
        double* d = p.data();
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        const int64_t n = p.numel();
        for (int64_t i = 0; i < n; ++i) {
            m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
            v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            d[i] -= lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * d[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

} // namespace tpg
