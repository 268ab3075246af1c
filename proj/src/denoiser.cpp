#include "tpg/denoiser.h"

#include <stdexcept>

namespace tpg {

StageClass classify_stage(StageKind kind, int index, const UNetConfig& cfg) {
    int factor;
    switch (kind) {
        case StageKind::Encoder:
            if (index < 0 || index >= cfg.stages) throw std::invalid_argument("encoder stage index out of range");
            factor = 1 << index;
            break;
        case StageKind::Bottleneck:
            factor = 1 << (cfg.stages - 1);
            break;
        case StageKind::Decoder:
            if (index < 0 || index >= cfg.stages) throw std::invalid_argument("decoder stage index out of range");
            factor = 1 << (cfg.stages - 1 - index);
            break;
        default:
            throw std::invalid_argument("bad stage kind");
    }
    return factor <= 4 ? StageClass::Shallow : StageClass::Deep;
}

namespace {

bool place_covers(const std::string& place, StageClass cls) {
    if (place == "both") return true;
    if (place == "none") return false;
    if (place == "deep") return cls == StageClass::Deep;
    if (place == "shallow") return cls == StageClass::Shallow;
    throw std::invalid_argument("unknown placement '" + place + "' (expected deep|shallow|both|none)");
}

} // namespace

// ---- ResBlock -----------------------------------------------------------------

ResBlock::ResBlock(int64_t in_ch, int64_t out_ch, int64_t t_dim, int groups, Rng& rng) {
    n1 = GroupNorm(in_ch, groups);
    conv1 = Conv2d(in_ch, out_ch, 3, 1, 1, rng);
    time_proj = Linear(t_dim, out_ch, rng);
    n2 = GroupNorm(out_ch, groups);
    conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng);
    has_skip = in_ch != out_ch;
    if (has_skip) skip = Conv2d(in_ch, out_ch, 1, 1, 0, rng);
}

Tensor ResBlock::apply(const Tensor& x, const Tensor& t_embed) const {
    Tensor h = conv1.apply(silu(n1.apply(x)));
    Tensor t = time_proj.apply(t_embed); // [out_ch]
    h = add(h, reshape(t, {t.dim(0), 1, 1}));
    h = conv2.apply(silu(n2.apply(h)));
    return add(h, has_skip ? skip.apply(x) : x);
}

void ResBlock::collect(const std::string& prefix, ParamStore& store) const {
    n1.collect(prefix + ".n1", store);
    conv1.collect(prefix + ".conv1", store);
    time_proj.collect(prefix + ".tproj", store);
    n2.collect(prefix + ".n2", store);
    conv2.collect(prefix + ".conv2", store);
    if (has_skip) skip.collect(prefix + ".skip", store);
}

// ---- semantic attention block ----------------------------------------------------

SemanticAttnBlock::SemanticAttnBlock(int64_t channels, int64_t ctx_dim, int64_t attn_dim, int heads_, Rng& rng)
    : heads(heads_) {
    if (heads < 1 || attn_dim % heads != 0)
        throw std::invalid_argument("attention width " + std::to_string(attn_dim) + " must split across " +
                                    std::to_string(heads_) + " heads");
    wq = kaiming_init({channels, attn_dim}, channels, rng);
    wk = kaiming_init({ctx_dim, attn_dim}, ctx_dim, rng);
    wv = kaiming_init({ctx_dim, attn_dim}, ctx_dim, rng);
    wo = Tensor::zeros({attn_dim, channels}, true);
}

namespace {

Tensor column_block(const Tensor& m, int64_t start, int64_t len) {
    return transpose(slice0(transpose(m), start, len));
}

} // namespace

Tensor SemanticAttnBlock::apply(const Tensor& features, const Tensor& context) const {
    const int64_t C = features.dim(0), H = features.dim(1), W = features.dim(2);
    Tensor rows = transpose(reshape(features, {C, H * W})); // [HW, C]
    Tensor gathered;                                        // [HW, attn]
    if (heads == 1) {
        gathered = deep_cross_attention(rows, context, wq, wk, wv);
    } else {
        Tensor q = matmul(rows, wq);
        Tensor k = matmul(context, wk);
        Tensor v = matmul(context, wv);
        const int64_t dh = wq.dim(1) / heads;
        std::vector<Tensor> head_out;
        for (int g = 0; g < heads; ++g)
            head_out.push_back(attention(column_block(q, g * dh, dh), column_block(k, g * dh, dh),
                                         column_block(v, g * dh, dh)));
        gathered = concat(head_out, 1);
    }
    Tensor residual = transpose(matmul(gathered, wo)); // [C, HW]
    return add(features, reshape(residual, {C, H, W}));
}

void SemanticAttnBlock::collect(const std::string& prefix, ParamStore& store) const {
    store.add(prefix + ".wq", wq);
    store.add(prefix + ".wk", wk);
    store.add(prefix + ".wv", wv);
    store.add(prefix + ".wo", wo);
}

// ---- UNet ------------------------------------------------------------------------

namespace {

UNetStage make_stage(StageKind kind, int index, int64_t in_ch, int64_t out_ch, const UNetConfig& cfg,
                     const std::string& name, Rng& rng) {
    UNetStage s;
    s.cls = classify_stage(kind, index, cfg);
    s.name = name;
    s.res = ResBlock(in_ch, out_ch, cfg.t_dim, cfg.groups, rng);
    // both injectors exist at every stage; placement decides use at run time,
    // keeping checkpoints interchangeable across placement configurations
    s.film = FilmAdapter(cfg.struct_dim, cfg.film_hidden, out_ch, rng);
    s.attn = SemanticAttnBlock(out_ch, cfg.ctx_dim, cfg.attn_dim, cfg.sem_heads, rng);
    return s;
}

} // namespace

Denoiser::Denoiser(const UNetConfig& cfg_, uint64_t seed) : cfg(cfg_) {
    if (cfg.stages < 2) throw std::invalid_argument("denoiser needs at least 2 stages");
    Rng rng(seed);
    conv_in = Conv2d(2 * cfg.img_channels, cfg.base, 3, 1, 1, rng);
    for (int i = 0; i < cfg.stages; ++i) {
        const int64_t ch = cfg.stage_channels(i);
        enc.push_back(make_stage(StageKind::Encoder, i, ch, ch, cfg, "enc" + std::to_string(i), rng));
        if (i + 1 < cfg.stages) down.push_back(Conv2d(ch, cfg.stage_channels(i + 1), 3, 2, 1, rng));
    }
    const int64_t mid_ch = cfg.stage_channels(cfg.stages - 1);
    mid = make_stage(StageKind::Bottleneck, 0, mid_ch, mid_ch, cfg, "mid", rng);
    for (int j = 0; j < cfg.stages; ++j) {
        const int64_t ch = cfg.stage_channels(cfg.stages - 1 - j);
        dec.push_back(make_stage(StageKind::Decoder, j, 2 * ch, ch, cfg, "dec" + std::to_string(j), rng));
        if (j + 1 < cfg.stages) up_conv.push_back(Conv2d(ch, cfg.stage_channels(cfg.stages - 2 - j), 3, 1, 1, rng));
    }
    out_norm = GroupNorm(cfg.base, cfg.groups);
    out_conv = Conv2d(cfg.base, cfg.img_channels, 3, 1, 1, rng);
}

Tensor Denoiser::run_stage(const UNetStage& stage, Tensor h, const Tensor& t_embed, const PriorBundle& priors,
                           const InjectionFlags& flags) const {
    h = stage.res.apply(h, t_embed);
    if (flags.strct && place_covers(cfg.struct_place, stage.cls)) h = stage.film.apply(h, priors.struct_tokens);
    if (flags.sem && place_covers(cfg.sem_place, stage.cls)) h = stage.attn.apply(h, priors.sem_context);
    return h;
}

Tensor Denoiser::forward(const Tensor& x_t, const Tensor& mu, int tau, const PriorBundle& priors,
                         const TimeModulator* tmod, const InjectionFlags& flags) const {
    if (x_t.rank() != 3 || x_t.shape() != mu.shape())
        throw std::invalid_argument("denoiser input: x_t " + shape_str(x_t.shape()) + " vs mu " +
                                    shape_str(mu.shape()));
    if (x_t.dim(0) != cfg.img_channels)
        throw std::invalid_argument("denoiser expects " + std::to_string(cfg.img_channels) + " image channels");
    const int64_t div = 1 << (cfg.stages - 1);
    if (x_t.dim(1) % div != 0 || x_t.dim(2) % div != 0)
        throw std::invalid_argument("denoiser input " + shape_str(x_t.shape()) + " not divisible by " +
                                    std::to_string(div));
    Tensor t_embed;
    if (flags.deg) {
        if (tmod == nullptr) throw std::invalid_argument("degradation flag set but no time modulator given");
        t_embed = tmod->modulate(tau, priors.deg);
    } else {
        t_embed = TimeModulator::time_embedding(tau, cfg.t_dim);
    }

    Tensor h = conv_in.apply(concat({x_t, mu}, 0));
    std::vector<Tensor> skips;
    for (int i = 0; i < cfg.stages; ++i) {
        h = run_stage(enc[static_cast<size_t>(i)], h, t_embed, priors, flags);
        skips.push_back(h);
        if (i + 1 < cfg.stages) h = down[static_cast<size_t>(i)].apply(h);
    }
    h = run_stage(mid, h, t_embed, priors, flags);
    for (int j = 0; j < cfg.stages; ++j) {
        h = concat({h, skips[static_cast<size_t>(cfg.stages - 1 - j)]}, 0);
        h = run_stage(dec[static_cast<size_t>(j)], h, t_embed, priors, flags);
        if (j + 1 < cfg.stages) h = up_conv[static_cast<size_t>(j)].apply(upsample_nearest2(h));
    }
    return out_conv.apply(silu(out_norm.apply(h)));
}

void Denoiser::collect(const std::string& prefix, ParamStore& store) const {
    auto collect_stage = [&](const UNetStage& s) {
        s.res.collect(prefix + "." + s.name + ".res", store);
        s.film.collect(prefix + "." + s.name + ".film", store);
        s.attn.collect(prefix + "." + s.name + ".attn", store);
    };
    conv_in.collect(prefix + ".conv_in", store);
    for (const auto& s : enc) collect_stage(s);
    for (size_t i = 0; i < down.size(); ++i) down[i].collect(prefix + ".down" + std::to_string(i), store);
    collect_stage(mid);
    for (const auto& s : dec) collect_stage(s);
    for (size_t i = 0; i < up_conv.size(); ++i) up_conv[i].collect(prefix + ".up" + std::to_string(i), store);
    out_norm.collect(prefix + ".out_norm", store);
    out_conv.collect(prefix + ".out_conv", store);
}

} // namespace tpg
