#ifndef TPG_SEMANTIC_H
#define TPG_SEMANTIC_H

#include "tpg/nn.h"
#include "tpg/tensor.h"

#include <string>

namespace tpg {

// Small convolutional embedding network: stem conv, two strided pooling
// convs, global average pool, linear projection head.
struct SemanticEncoder {
    Conv2d stem;  // C_img -> 16
    Conv2d down1; // 16 -> 32, stride 2
    Conv2d down2; // 32 -> 32, stride 2
    Linear head;  // 32 -> dim
    int64_t dim = 64;
    bool frozen = false;

    SemanticEncoder() = default;
    SemanticEncoder(int64_t img_channels, int64_t dim, Rng& rng);

    Tensor encode(const Tensor& image) const; // [C,H,W] -> [dim]
    void collect(const std::string& prefix, ParamStore& store) const;
    void freeze();
};

// Teacher-student pair plus the projection that turns the student embedding
// into a context token sequence for cross-attention.
struct SemanticPrior {
    SemanticEncoder teacher; // frozen reference encoder, seed-pinned
    SemanticEncoder student;
    Linear ctx_proj; // dim -> tokens * ctx_dim
    int64_t tokens = 4;
    int64_t ctx_dim = 64;

    SemanticPrior() = default;
    SemanticPrior(int64_t img_channels, int64_t dim, int64_t tokens, int64_t ctx_dim,
                  uint64_t teacher_seed, uint64_t student_seed);

    Tensor teacher_embed(const Tensor& x_gt) const { return teacher.encode(x_gt); }
    Tensor student_embed(const Tensor& x_lq) const { return student.encode(x_lq); }

    // student embedding reshaped into [tokens, ctx_dim]
    Tensor extract_context(const Tensor& x_lq) const;

    void collect(const std::string& prefix, ParamStore& store) const;
};

// (1/B) sum_i (1 - cos(z_s_i, z_t_i)) over rows of [B,D] inputs (vectors are
// treated as B=1). Differentiable w.r.t. z_s; rejects zero-norm rows.
Tensor distill_loss(const Tensor& z_s, const Tensor& z_t);

// softmax(Q K^T / sqrt(d)) V with Q = X Wq, K = C Wk, V = C Wv.
// X [L,Dx], C [M,Dc]; the caller adds the result residually.
Tensor deep_cross_attention(const Tensor& x, const Tensor& context, const Tensor& wq, const Tensor& wk,
                            const Tensor& wv);

} // namespace tpg

#endif
