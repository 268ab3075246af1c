#ifndef TPG_DENOISER_H
#define TPG_DENOISER_H

#include "tpg/degradation.h"
#include "tpg/nn.h"
#include "tpg/semantic.h"
#include "tpg/structural.h"
#include "tpg/tensor.h"

#include <string>
#include <vector>

namespace tpg {

// The conditioning triple consumed by the denoiser, all derived from the
// same low-quality input.
struct PriorBundle {
    Tensor sem_context;   // [M, ctx_dim]
    Tensor struct_tokens; // z_struct [N, struct_dim]
    Tensor deg;           // z_deg [deg_dim]
};

struct UNetConfig {
    int64_t img_channels = 1;
    int64_t base = 32; // channels double per stage
    int stages = 4;
    int groups = 8;
    int64_t t_dim = 128;
    int64_t attn_dim = 32;
    int64_t ctx_dim = 64;
    int64_t struct_dim = 64;
    int64_t film_hidden = 64;
    int sem_heads = 1; // attn_dim splits evenly across heads
    bool seg_onehot = false;
    std::string sem_place = "deep";      // deep | shallow | both | none
    std::string struct_place = "shallow";

    int64_t stage_channels(int i) const { return base << i; }
};

enum class StageKind { Encoder, Bottleneck, Decoder };
enum class StageClass { Shallow, Deep };

// Resolution-based partition: stages running at >= H/4 are shallow, <= H/8
// are deep. Encoder stage i sits at H/2^i, decoder stage j at H/2^(S-1-j),
// the bottleneck at the lowest resolution.
StageClass classify_stage(StageKind kind, int index, const UNetConfig& cfg);

struct InjectionFlags {
    bool deg = true;
    bool sem = true;
    bool strct = true;
};

struct ResBlock {
    GroupNorm n1, n2;
    Conv2d conv1, conv2;
    Linear time_proj; // t_dim -> out_ch
    Conv2d skip;      // 1x1 when in_ch != out_ch
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(int64_t in_ch, int64_t out_ch, int64_t t_dim, int groups, Rng& rng);
    Tensor apply(const Tensor& x, const Tensor& t_embed) const;
    void collect(const std::string& prefix, ParamStore& store) const;
};

// Cross-attention over semantic context tokens added residually through a
// zero-initialized output projection (exact no-op at init). With more than
// one head the projected width splits into per-head column groups.
struct SemanticAttnBlock {
    Tensor wq; // [C, attn]
    Tensor wk; // [ctx, attn]
    Tensor wv; // [ctx, attn]
    Tensor wo; // [attn, C], zero-init
    int heads = 1;

    SemanticAttnBlock() = default;
    SemanticAttnBlock(int64_t channels, int64_t ctx_dim, int64_t attn_dim, int heads, Rng& rng);
    Tensor apply(const Tensor& features, const Tensor& context) const;
    void collect(const std::string& prefix, ParamStore& store) const;
};

struct UNetStage {
    ResBlock res;
    FilmAdapter film;
    SemanticAttnBlock attn;
    StageClass cls = StageClass::Shallow;
    std::string name;
};

// Noise-prediction UNet. Input is concat(x_t, mu); structural FiLM and
// semantic cross-attention attach to stages selected by the placement
// strings; the time embedding is degradation-modulated when enabled.
struct Denoiser {
    UNetConfig cfg;
    Conv2d conv_in;
    std::vector<UNetStage> enc;
    std::vector<Conv2d> down;    // between encoder stages
    UNetStage mid;
    std::vector<Conv2d> up_conv; // after nearest-neighbor upsample
    std::vector<UNetStage> dec;
    GroupNorm out_norm;
    Conv2d out_conv;

    Denoiser() = default;
    Denoiser(const UNetConfig& cfg, uint64_t seed);

    // tmod may be null when flags.deg is false
    Tensor forward(const Tensor& x_t, const Tensor& mu, int tau, const PriorBundle& priors,
                   const TimeModulator* tmod, const InjectionFlags& flags) const;

    void collect(const std::string& prefix, ParamStore& store) const;

private:
    Tensor run_stage(const UNetStage& stage, Tensor h, const Tensor& t_embed, const PriorBundle& priors,
                     const InjectionFlags& flags) const;
};

} // namespace tpg

#endif
