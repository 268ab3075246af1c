#ifndef TPG_STRUCTURAL_H
#define TPG_STRUCTURAL_H

#include "tpg/nn.h"
#include "tpg/tensor.h"

#include <string>
#include <vector>

namespace tpg {

enum class Modality { Depth = 0, Seg = 1, DoG = 2 };
Modality modality_from_string(const std::string& name);

// Spatially aligned cue maps, each [1,H,W].
struct StructuralCues {
    Tensor depth; // [0,1]
    Tensor seg;   // labels normalized to [0,1]
    Tensor dog;   // signed band-pass response
};

// Gaussian(sigma1)*x - Gaussian(sigma2)*x with symmetric reflect padding.
// Accepts [H,W] or [1,H,W]; output matches the input shape. Not differentiated
// (cue maps are data, not part of a training graph).
Tensor compute_dog(const Tensor& gray, double sigma1, double sigma2);

// mean over channels for [C,H,W] inputs, identity for single-channel
Tensor to_grayscale(const Tensor& image);

// Number of channels a one-hot expanded segment map uses (background plus
// the renderer's shape budget).
constexpr int64_t kSegOneHotChannels = 9;

// Expands a normalized label map into kSegOneHotChannels indicator planes.
Tensor seg_to_onehot(const Tensor& seg);

// Shared token encoder with per-modality input adaptation and embeddings.
// Three stride-2 stages: token count is (H/8)*(W/8) per modality.
struct StructuralEncoder {
    Conv2d adapt[3]; // 1x1 conv onto the shared width, one per modality
    Tensor embed[3]; // [width], learnable modality embeddings
    Conv2d enc1, enc2, enc3;
    int64_t width = 64;
    bool seg_onehot = false; // segment cue as indicator channels instead of intensities

    StructuralEncoder() = default;
    StructuralEncoder(int64_t width, Rng& rng, bool seg_onehot = false);

    Tensor encode(const Tensor& cue, Modality m) const; // [1,H,W] -> [(H/8)*(W/8), width]
    void collect(const std::string& prefix, ParamStore& store) const;
};

// Latent-token aggregation: cross-attention from learnable latents over the
// concatenated modality tokens, then a linear projection and one
// self-attention pass over the latents.
struct TokenAggregator {
    Tensor latents;             // [N, D]
    Tensor ca_wq, ca_wk, ca_wv; // [D, attn]
    Linear proj;                // attn -> D
    Tensor sa_wq, sa_wk;        // [D, attn]
    Tensor sa_wv;               // [D, D]
    int64_t n_latents = 16;
    int64_t dim = 64;

    TokenAggregator() = default;
    TokenAggregator(int64_t n_latents, int64_t dim, int64_t attn_dim, Rng& rng);

    Tensor aggregate(const std::vector<Tensor>& modality_tokens) const; // -> [N, D]
    void collect(const std::string& prefix, ParamStore& store) const;
};

struct StructuralPrior {
    StructuralEncoder encoder;
    TokenAggregator sta;
    double dog_sigma1 = 1.0;
    double dog_sigma2 = 2.0;

    StructuralPrior() = default;
    StructuralPrior(int64_t dim, int64_t n_latents, int64_t attn_dim, uint64_t seed, bool seg_onehot = false);

    Tensor extract(const StructuralCues& cues) const; // -> z_struct [N, D]
    void collect(const std::string& prefix, ParamStore& store) const;
};

// Channel-wise feature modulation F * (1 + gamma) + beta where [gamma, beta]
// come from a two-layer MLP over the token-mean of z_struct. The final layer
// starts at zero so the modulation begins as an exact identity.
struct FilmAdapter {
    Linear fc1; // D -> hidden
    Linear fc2; // hidden -> 2C, zero-init
    int64_t channels = 0;

    FilmAdapter() = default;
    FilmAdapter(int64_t token_dim, int64_t hidden, int64_t channels, Rng& rng);

    Tensor apply(const Tensor& features, const Tensor& z_struct) const;
    void collect(const std::string& prefix, ParamStore& store) const;
};

} // namespace tpg

#endif
