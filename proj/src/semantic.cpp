#include "tpg/semantic.h"

#include <cmath>
#include <stdexcept>

namespace tpg {

SemanticEncoder::SemanticEncoder(int64_t img_channels, int64_t dim_, Rng& rng) : dim(dim_) {
    stem = Conv2d(img_channels, 16, 3, 1, 1, rng);
    down1 = Conv2d(16, 32, 3, 2, 1, rng);
    down2 = Conv2d(32, 32, 3, 2, 1, rng);
    head = Linear(32, dim, rng);
}

Tensor SemanticEncoder::encode(const Tensor& image) const {
    Tensor h = silu(stem.apply(image));
    h = silu(down1.apply(h));
    h = silu(down2.apply(h));
    // global average pool
    const int64_t c = h.dim(0);
    Tensor pooled = mean_axis(reshape(h, {c, h.dim(1) * h.dim(2)}), 1);
    return head.apply(pooled);
}

void SemanticEncoder::collect(const std::string& prefix, ParamStore& store) const {
    stem.collect(prefix + ".stem", store);
    down1.collect(prefix + ".down1", store);
    down2.collect(prefix + ".down2", store);
    head.collect(prefix + ".head", store);
}

void SemanticEncoder::freeze() {
    frozen = true;
    ParamStore store;
    collect("f", store);
    for (auto& [name, t] : store.items()) t.set_requires_grad(false);
}

SemanticPrior::SemanticPrior(int64_t img_channels, int64_t dim, int64_t tokens_, int64_t ctx_dim_,
                             uint64_t teacher_seed, uint64_t student_seed)
    : tokens(tokens_), ctx_dim(ctx_dim_) {
    Rng trng(teacher_seed);
    teacher = SemanticEncoder(img_channels, dim, trng);
    teacher.freeze();
    Rng srng(student_seed);
    student = SemanticEncoder(img_channels, dim, srng);
    Rng prng(mix_seed(student_seed, 1));
    ctx_proj = Linear(dim, tokens * ctx_dim, prng);
}

Tensor SemanticPrior::extract_context(const Tensor& x_lq) const {
    Tensor z = student.encode(x_lq);
    return reshape(ctx_proj.apply(z), {tokens, ctx_dim});
}

void SemanticPrior::collect(const std::string& prefix, ParamStore& store) const {
    teacher.collect(prefix + ".teacher", store);
    student.collect(prefix + ".student", store);
    ctx_proj.collect(prefix + ".ctx_proj", store);
}

Tensor distill_loss(const Tensor& z_s0, const Tensor& z_t0) {
    Tensor z_s = z_s0.rank() == 1 ? reshape(z_s0, {1, z_s0.dim(0)}) : z_s0;
    Tensor z_t = z_t0.rank() == 1 ? reshape(z_t0, {1, z_t0.dim(0)}) : z_t0;
    if (z_s.rank() != 2 || z_t.rank() != 2 || z_s.shape() != z_t.shape())
        throw std::invalid_argument("distill_loss expects matching [B,D] inputs, got " + shape_str(z_s0.shape()) +
                                    " vs " + shape_str(z_t0.shape()));
    const int64_t B = z_s.dim(0), D = z_s.dim(1);
    for (int64_t r = 0; r < B; ++r) {
        double ns = 0.0, nt = 0.0;
        for (int64_t c = 0; c < D; ++c) {
            ns += z_s.at(r * D + c) * z_s.at(r * D + c);
            nt += z_t.at(r * D + c) * z_t.at(r * D + c);
        }
        if (ns == 0.0 || nt == 0.0)
            throw std::invalid_argument("distill_loss: zero-norm vector at batch index " + std::to_string(r));
    }
    Tensor dots = sum_axis(mul(z_s, z_t), 1);                  // [B]
    Tensor norm_s = sqrt(sum_axis(mul(z_s, z_s), 1));          // [B]
    Tensor norm_t = sqrt(sum_axis(mul(z_t, z_t), 1));          // [B]
    Tensor cosine = div(dots, mul(norm_s, norm_t));            // [B]
    return mean(add_scalar(neg(cosine), 1.0));
}

Tensor deep_cross_attention(const Tensor& x, const Tensor& context, const Tensor& wq, const Tensor& wk,
                            const Tensor& wv) {
    if (x.rank() != 2 || context.rank() != 2)
        throw std::invalid_argument("deep_cross_attention expects rank-2 features and context");
    if (x.dim(1) != wq.dim(0))
        throw std::invalid_argument("deep_cross_attention: feature width " + std::to_string(x.dim(1)) +
                                    " does not match W_q rows " + std::to_string(wq.dim(0)));
    if (context.dim(1) != wk.dim(0) || context.dim(1) != wv.dim(0))
        throw std::invalid_argument("deep_cross_attention: context width " + std::to_string(context.dim(1)) +
                                    " does not match W_k/W_v rows");
    if (wq.dim(1) != wk.dim(1))
        throw std::invalid_argument("deep_cross_attention: W_q/W_k output widths disagree");
    return attention(matmul(x, wq), matmul(context, wk), matmul(context, wv));
}

} // namespace tpg
