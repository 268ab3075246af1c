#include "tpg/structural.h"

#include <cmath>
#include <stdexcept>

namespace tpg {

Modality modality_from_string(const std::string& name) {
    if (name == "depth" || name == "Dep") return Modality::Depth;
    if (name == "seg" || name == "Seg") return Modality::Seg;
    if (name == "dog" || name == "DoG") return Modality::DoG;
    throw std::invalid_argument("unknown structural modality '" + name + "'");
}

namespace {

int64_t reflect_index(int64_t i, int64_t n) {
    // symmetric (edge-repeating) reflection, folded until in range
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

std::vector<double> gaussian_kernel(double sigma, int64_t& radius) {
    radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double total = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        total += v;
    }
    for (auto& v : k) v /= total;
    return k;
}

// separable blur with reflect borders on a raw [H,W] buffer
std::vector<double> blur_reflect(const std::vector<double>& img, int64_t H, int64_t W, double sigma) {
    int64_t radius = 0;
    const auto k = gaussian_kernel(sigma, radius);
    std::vector<double> tmp(static_cast<size_t>(H * W)), out(static_cast<size_t>(H * W));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int64_t d = -radius; d <= radius; ++d)
                acc += k[static_cast<size_t>(d + radius)] * img[static_cast<size_t>(y * W + reflect_index(x + d, W))];
            tmp[static_cast<size_t>(y * W + x)] = acc;
        }
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int64_t d = -radius; d <= radius; ++d)
                acc += k[static_cast<size_t>(d + radius)] * tmp[static_cast<size_t>(reflect_index(y + d, H) * W + x)];
            out[static_cast<size_t>(y * W + x)] = acc;
        }
    return out;
}

} // namespace

Tensor compute_dog(const Tensor& gray, double sigma1, double sigma2) {
    if (!(sigma1 > 0.0) || !(sigma2 > sigma1))
        throw std::invalid_argument("compute_dog requires sigma2 > sigma1 > 0, got (" + std::to_string(sigma1) +
                                    ", " + std::to_string(sigma2) + ")");
    int64_t H, W;
    if (gray.rank() == 2) {
        H = gray.dim(0);
        W = gray.dim(1);
    } else if (gray.rank() == 3 && gray.dim(0) == 1) {
        H = gray.dim(1);
        W = gray.dim(2);
    } else {
        throw std::invalid_argument("compute_dog expects a single-channel image, got " + shape_str(gray.shape()));
    }
    const auto g1 = blur_reflect(gray.vec(), H, W, sigma1);
    const auto g2 = blur_reflect(gray.vec(), H, W, sigma2);
    Tensor out = Tensor::zeros(gray.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = g1[static_cast<size_t>(i)] - g2[static_cast<size_t>(i)];
    return out;
}

Tensor to_grayscale(const Tensor& image) {
    if (image.rank() == 2) return image;
    if (image.rank() != 3) throw std::invalid_argument("to_grayscale expects [C,H,W] or [H,W]");
    if (image.dim(0) == 1) return image;
    const int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out = Tensor::zeros({1, H, W});
    for (int64_t i = 0; i < H * W; ++i) {
        double acc = 0.0;
        for (int64_t c = 0; c < C; ++c) acc += image.at(c * H * W + i);
        out.data()[i] = acc / static_cast<double>(C);
    }
    return out;
}

Tensor seg_to_onehot(const Tensor& seg) {
    int64_t H, W;
    if (seg.rank() == 3 && seg.dim(0) == 1) {
        H = seg.dim(1);
        W = seg.dim(2);
    } else if (seg.rank() == 2) {
        H = seg.dim(0);
        W = seg.dim(1);
    } else {
        throw std::invalid_argument("seg_to_onehot expects a single-channel label map");
    }
    Tensor out = Tensor::zeros({kSegOneHotChannels, H, W});
    for (int64_t i = 0; i < H * W; ++i) {
        // normalized intensities map injectively onto the channel grid for
        // up to kSegOneHotChannels-1 shapes
        int64_t c = static_cast<int64_t>(std::llround(seg.at(i) * (kSegOneHotChannels - 1)));
        c = std::clamp<int64_t>(c, 0, kSegOneHotChannels - 1);
        out.data()[c * H * W + i] = 1.0;
    }
    return out;
}

// ---- encoder -----------------------------------------------------------------

StructuralEncoder::StructuralEncoder(int64_t width_, Rng& rng, bool seg_onehot_)
    : width(width_), seg_onehot(seg_onehot_) {
    for (int m = 0; m < 3; ++m) {
        const int64_t in_ch = (m == static_cast<int>(Modality::Seg) && seg_onehot) ? kSegOneHotChannels : 1;
        adapt[m] = Conv2d(in_ch, width, 1, 1, 0, rng);
        embed[m] = normal_init({width}, 1.0, rng);
    }
    // embeddings must separate modalities even for identical cue maps
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b)
            if (embed[a].vec() == embed[b].vec()) embed[b].data()[0] += 1.0;
    enc1 = Conv2d(width, width, 3, 2, 1, rng);
    enc2 = Conv2d(width, width, 3, 2, 1, rng);
    enc3 = Conv2d(width, width, 3, 2, 1, rng);
}

Tensor StructuralEncoder::encode(const Tensor& cue0, Modality m) const {
    const int mi = static_cast<int>(m);
    if (mi < 0 || mi > 2) throw std::invalid_argument("unknown modality tag");
    Tensor cue = (m == Modality::Seg && seg_onehot) ? seg_to_onehot(cue0) : cue0;
    Tensor h = adapt[mi].apply(cue);
    h = add(h, reshape(embed[mi], {width, 1, 1}));
    h = silu(enc1.apply(h));
    h = silu(enc2.apply(h));
    h = silu(enc3.apply(h)); // [width, H/8, W/8]
    return transpose(reshape(h, {width, h.dim(1) * h.dim(2)})); // [(H/8)*(W/8), width]
}

void StructuralEncoder::collect(const std::string& prefix, ParamStore& store) const {
    static const char* names[3] = {"dep", "seg", "dog"};
    for (int m = 0; m < 3; ++m) {
        adapt[m].collect(prefix + ".adapt_" + names[m], store);
        store.add(prefix + ".embed_" + names[m], embed[m]);
    }
    enc1.collect(prefix + ".enc1", store);
    enc2.collect(prefix + ".enc2", store);
    enc3.collect(prefix + ".enc3", store);
}

// ---- aggregator ------------------------------------------------------------------

TokenAggregator::TokenAggregator(int64_t n_latents_, int64_t dim_, int64_t attn_dim, Rng& rng)
    : n_latents(n_latents_), dim(dim_) {
    latents = normal_init({n_latents, dim}, 0.5, rng);
    ca_wq = kaiming_init({dim, attn_dim}, dim, rng);
    ca_wk = kaiming_init({dim, attn_dim}, dim, rng);
    ca_wv = kaiming_init({dim, attn_dim}, dim, rng);
    proj = Linear(attn_dim, dim, rng);
    sa_wq = kaiming_init({dim, attn_dim}, dim, rng);
    sa_wk = kaiming_init({dim, attn_dim}, dim, rng);
    sa_wv = kaiming_init({dim, dim}, dim, rng);
}

Tensor TokenAggregator::aggregate(const std::vector<Tensor>& modality_tokens) const {
    if (modality_tokens.empty()) throw std::invalid_argument("aggregate: empty token set");
    for (const auto& t : modality_tokens)
        if (t.rank() != 2 || t.dim(1) != dim)
            throw std::invalid_argument("aggregate: tokens must be [n," + std::to_string(dim) + "], got " +
                                        shape_str(t.shape()));
    Tensor all = modality_tokens.size() == 1 ? modality_tokens[0] : concat(modality_tokens, 0);
    Tensor gathered = attention(matmul(latents, ca_wq), matmul(all, ca_wk), matmul(all, ca_wv));
    Tensor projected = proj.apply(gathered); // [N, D]
    return attention(matmul(projected, sa_wq), matmul(projected, sa_wk), matmul(projected, sa_wv));
}

void TokenAggregator::collect(const std::string& prefix, ParamStore& store) const {
    store.add(prefix + ".latents", latents);
    store.add(prefix + ".ca_wq", ca_wq);
    store.add(prefix + ".ca_wk", ca_wk);
    store.add(prefix + ".ca_wv", ca_wv);
    proj.collect(prefix + ".proj", store);
    store.add(prefix + ".sa_wq", sa_wq);
    store.add(prefix + ".sa_wk", sa_wk);
    store.add(prefix + ".sa_wv", sa_wv);
}

// ---- prior bundle ------------------------------------------------------------------

StructuralPrior::StructuralPrior(int64_t dim, int64_t n_latents, int64_t attn_dim, uint64_t seed, bool seg_onehot) {
    Rng rng(seed);
    encoder = StructuralEncoder(dim, rng, seg_onehot);
    sta = TokenAggregator(n_latents, dim, attn_dim, rng);
}

Tensor StructuralPrior::extract(const StructuralCues& cues) const {
    std::vector<Tensor> tokens;
    tokens.push_back(encoder.encode(cues.depth, Modality::Depth));
    tokens.push_back(encoder.encode(cues.seg, Modality::Seg));
    tokens.push_back(encoder.encode(cues.dog, Modality::DoG));
    return sta.aggregate(tokens);
}

void StructuralPrior::collect(const std::string& prefix, ParamStore& store) const {
    encoder.collect(prefix + ".enc", store);
    sta.collect(prefix + ".sta", store);
}

// ---- FiLM ---------------------------------------------------------------------------

FilmAdapter::FilmAdapter(int64_t token_dim, int64_t hidden, int64_t channels_, Rng& rng) : channels(channels_) {
    fc1 = Linear(token_dim, hidden, rng);
    fc2 = Linear(hidden, 2 * channels, rng, /*zero_init=*/true);
}

Tensor FilmAdapter::apply(const Tensor& features, const Tensor& z_struct) const {
    if (features.rank() != 3 || features.dim(0) != channels)
        throw std::invalid_argument("film: features " + shape_str(features.shape()) + " do not match channel count " +
                                    std::to_string(channels));
    if (fc2.w.dim(1) != 2 * channels)
        throw std::invalid_argument("film: modulation width " + std::to_string(fc2.w.dim(1)) + " != 2*C");
    Tensor pooled = mean_axis(z_struct, 0);             // [D]
    Tensor gb = fc2.apply(silu(fc1.apply(pooled)));     // [2C]
    Tensor two_c = reshape(gb, {2, channels});
    Tensor gamma = reshape(slice0(two_c, 0, 1), {channels, 1, 1});
    Tensor beta = reshape(slice0(two_c, 1, 1), {channels, 1, 1});
    return add(mul(features, add_scalar(gamma, 1.0)), beta);
}

void FilmAdapter::collect(const std::string& prefix, ParamStore& store) const {
    fc1.collect(prefix + ".fc1", store);
    fc2.collect(prefix + ".fc2", store);
}

} // namespace tpg
