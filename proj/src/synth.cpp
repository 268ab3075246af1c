#include "tpg/synth.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace tpg {

namespace {

struct ShapeSpec {
    int kind; // 0 disk, 1 rectangle, 2 stripe
    double cx, cy;
    double a, b;     // radius / half extents / stripe half-width
    double angle;    // stripe orientation
    double color[3]; // per-channel intensity
};

// signed distance in pixels, negative inside
double shape_sdf(const ShapeSpec& s, double x, double y) {
    switch (s.kind) {
        case 0: { // disk
            const double dx = x - s.cx, dy = y - s.cy;
            return std::sqrt(dx * dx + dy * dy) - s.a;
        }
        case 1: { // axis-aligned rectangle
            const double dx = std::fabs(x - s.cx) - s.a;
            const double dy = std::fabs(y - s.cy) - s.b;
            const double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
            return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
        }
        default: { // stripe through (cx, cy) with normal at `angle`
            const double nx = std::cos(s.angle), ny = std::sin(s.angle);
            return std::fabs((x - s.cx) * nx + (y - s.cy) * ny) - s.a;
        }
    }
}

Scene try_render(uint64_t scene_seed, uint64_t attempt, int64_t H, int64_t W, int64_t C, int max_shapes) {
    Rng rng(mix_seed(scene_seed, attempt));
    Scene scene;
    scene.seed = scene_seed;
    scene.image = Tensor::zeros({C, H, W});
    scene.depth = Tensor::full({1, H, W}, 1.0); // background farthest
    scene.seg = Tensor::zeros({1, H, W});

    // gradient background
    double bg0[3], bg1[3];
    const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    for (int64_t c = 0; c < C; ++c) {
        bg0[c] = rng.uniform(0.15, 0.5);
        bg1[c] = rng.uniform(0.5, 0.85);
    }
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double u = (gx * x / std::max<int64_t>(1, W - 1) + gy * y / std::max<int64_t>(1, H - 1) + 2.0) / 4.0;
                scene.image.data()[(c * H + y) * W + x] = bg0[c] + (bg1[c] - bg0[c]) * u;
            }

    const int n = 3 + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_shapes - 2)));
    scene.n_shapes = n;
    const double min_dim = static_cast<double>(std::min(H, W));
    for (int k = 0; k < n; ++k) {
        ShapeSpec s;
        s.kind = static_cast<int>(rng.next_below(3));
        s.cx = rng.uniform(0.15, 0.85) * W;
        s.cy = rng.uniform(0.15, 0.85) * H;
        s.a = rng.uniform(0.08, 0.22) * min_dim;
        s.b = rng.uniform(0.08, 0.22) * min_dim;
        if (s.kind == 2) s.a = rng.uniform(0.05, 0.10) * min_dim; // stripe half-width
        s.angle = rng.uniform(0.0, 3.14159265358979323846);
        for (int64_t c = 0; c < 3; ++c) s.color[c] = rng.uniform(0.05, 0.95);
        // later shapes composite on top and sit strictly nearer
        const double depth_k = 0.9 - 0.8 * (static_cast<double>(k) + 1.0) / (n + 1.0);
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double sdf = shape_sdf(s, x + 0.5, y + 0.5);
                const double cov = std::clamp(0.5 - sdf, 0.0, 1.0);
                if (cov <= 0.0) continue;
                for (int64_t c = 0; c < C; ++c) {
                    double& px = scene.image.data()[(c * H + y) * W + x];
                    px = cov * s.color[c] + (1.0 - cov) * px;
                }
                if (cov > 0.5) {
                    scene.depth.data()[y * W + x] = depth_k;
                    scene.seg.data()[y * W + x] = static_cast<double>(k + 1);
                }
            }
    }
    return scene;
}

bool all_labels_visible(const Scene& scene) {
    std::vector<bool> seen(static_cast<size_t>(scene.n_shapes) + 1, false);
    for (int64_t i = 0; i < scene.seg.numel(); ++i) seen[static_cast<size_t>(scene.seg.at(i))] = true;
    for (bool b : seen)
        if (!b) return false;
    return true;
}

} // namespace

Scene render_scene(uint64_t seed, int64_t H, int64_t W, int64_t channels) {
    if (H < 8 || W < 8 || H > 64 || W > 64)
        throw std::invalid_argument("render_scene supports extents in [8, 64], got " + std::to_string(H) + "x" +
                                    std::to_string(W));
    if (channels != 1 && channels != 3) throw std::invalid_argument("render_scene supports 1 or 3 channels");
    // retry deterministically until every shape keeps visible pixels; relax
    // the shape budget if a layout keeps failing
    for (int max_shapes : {8, 6, 4, 3}) {
        for (uint64_t attempt = 0; attempt < 40; ++attempt) {
            Scene s = try_render(seed, attempt + 100 * static_cast<uint64_t>(max_shapes), H, W, channels, max_shapes);
            if (all_labels_visible(s)) return s;
        }
    }
    throw std::runtime_error("render_scene: could not place shapes without full occlusion");
}

const char* deg_kind_name(DegKind k) {
    switch (k) {
        case DegKind::Noise: return "noise";
        case DegKind::Rain: return "rain";
        case DegKind::Haze: return "haze";
        case DegKind::Lowlight: return "lowlight";
        case DegKind::Blur: return "blur";
    }
    return "?";
}

DegKind deg_kind_from_label(int label) {
    if (label < 0 || label >= kNumDegKinds) throw std::invalid_argument("degradation label out of range");
    return static_cast<DegKind>(label);
}

DegKind deg_kind_from_name(const std::string& name) {
    for (int i = 0; i < kNumDegKinds; ++i)
        if (name == deg_kind_name(static_cast<DegKind>(i))) return static_cast<DegKind>(i);
    throw std::invalid_argument("unknown degradation kind '" + name + "'");
}

namespace {

Tensor clip01(Tensor t) {
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = std::clamp(t.data()[i], 0.0, 1.0);
    return t;
}

} // namespace

Tensor apply_noise(const Tensor& x, double sigma, Rng& rng) {
    Tensor out = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.at(i) + sigma * rng.normal();
    return clip01(std::move(out));
}

Tensor apply_rain(const Tensor& x, double density, Rng& rng) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out = Tensor::from(x.shape(), x.vec());
    const int n_streaks = std::max<int>(1, static_cast<int>(density * H * W / 24.0));
    for (int s = 0; s < n_streaks; ++s) {
        const double x0 = rng.uniform(0.0, W);
        const double y0 = rng.uniform(0.0, H);
        const double angle = rng.uniform(-0.5, 0.5); // radians off vertical
        const double len = rng.uniform(0.25, 0.55) * H;
        const double bright = rng.uniform(0.25, 0.55);
        const double dx = std::sin(angle), dy = std::cos(angle);
        const int steps = static_cast<int>(len * 2.0);
        for (int i = 0; i < steps; ++i) {
            const double px = x0 + dx * i * 0.5;
            const double py = y0 + dy * i * 0.5;
            const int64_t ix = static_cast<int64_t>(std::floor(px));
            const int64_t iy = static_cast<int64_t>(std::floor(py));
            if (ix < 0 || ix >= W || iy < 0 || iy >= H) continue;
            for (int64_t c = 0; c < C; ++c) out.data()[(c * H + iy) * W + ix] += bright * 0.5;
        }
    }
    return clip01(std::move(out));
}

Tensor apply_haze(const Tensor& x, const Tensor& depth, double beta, double airlight) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (depth.numel() != H * W)
        throw std::invalid_argument("apply_haze: depth " + shape_str(depth.shape()) + " does not cover " +
                                    shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < H * W; ++i) {
        const double t = std::exp(-beta * depth.at(i));
        for (int64_t c = 0; c < C; ++c)
            out.data()[c * H * W + i] = x.at(c * H * W + i) * t + airlight * (1.0 - t);
    }
    return out; // convex blend of values in [0,1] needs no clipping
}

Tensor apply_lowlight(const Tensor& x, double gamma, double gain, double shot_noise, Rng& rng) {
    Tensor out = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        double v = gain * std::pow(std::max(x.at(i), 0.0), gamma);
        if (shot_noise > 0.0) v += std::sqrt(std::max(v, 0.0) * shot_noise) * rng.normal();
        out.data()[i] = v;
    }
    return clip01(std::move(out));
}

Tensor apply_blur(const Tensor& x, int length, double angle, Rng&) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t r = length / 2;
    const int64_t side = 2 * r + 1;
    // rasterize a line kernel through the center
    std::vector<double> kernel(static_cast<size_t>(side * side), 0.0);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const int steps = 4 * length;
    for (int i = 0; i <= steps; ++i) {
        const double t = (static_cast<double>(i) / steps - 0.5) * (length - 1);
        const int64_t kx = static_cast<int64_t>(std::llround(r + t * dx));
        const int64_t ky = static_cast<int64_t>(std::llround(r + t * dy));
        if (kx >= 0 && kx < side && ky >= 0 && ky < side) kernel[static_cast<size_t>(ky * side + kx)] += 1.0;
    }
    double total = 0.0;
    for (double v : kernel) total += v;
    for (auto& v : kernel) v /= total;

    auto refl = [](int64_t i, int64_t n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -1 - i;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };
    Tensor out = Tensor::zeros(x.shape());
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xq = 0; xq < W; ++xq) {
                double acc = 0.0;
                for (int64_t ky = 0; ky < side; ++ky)
                    for (int64_t kx = 0; kx < side; ++kx) {
                        const double kv = kernel[static_cast<size_t>(ky * side + kx)];
                        if (kv == 0.0) continue;
                        const int64_t iy = refl(y + ky - r, H);
                        const int64_t ix = refl(xq + kx - r, W);
                        acc += kv * x.at((c * H + iy) * W + ix);
                    }
                out.data()[(c * H + y) * W + xq] = acc;
            }
    return out;
}

double noise_sigma_for_severity(double severity) { return 0.05 + 0.15 * severity; }

Tensor degrade(const Tensor& x_gt, const Tensor& depth, DegKind kind, double severity, Rng& rng) {
    if (!(severity > 0.0) || severity > 1.0)
        throw std::invalid_argument("degrade: severity must lie in (0,1], got " + std::to_string(severity));
    switch (kind) {
        case DegKind::Noise:
            return apply_noise(x_gt, noise_sigma_for_severity(severity), rng);
        case DegKind::Rain:
            return apply_rain(x_gt, 0.2 + 0.8 * severity, rng);
        case DegKind::Haze:
            return apply_haze(x_gt, depth, 0.8 + 2.2 * severity, rng.uniform(0.75, 0.95));
        case DegKind::Lowlight:
            return apply_lowlight(x_gt, 1.0 + 1.2 * severity, 1.0 - 0.55 * severity, 0.01 * severity, rng);
        case DegKind::Blur:
            return apply_blur(x_gt, 3 + static_cast<int>(std::lround(4.0 * severity)), rng.uniform(0.0, 3.14159265),
                              rng);
    }
    throw std::invalid_argument("degrade: unknown kind");
}

// ---- corpus -----------------------------------------------------------------------

namespace {

Tensor normalized_seg(const Scene& scene) {
    Tensor seg = Tensor::zeros(scene.seg.shape());
    const double denom = std::max(1, scene.n_shapes);
    for (int64_t i = 0; i < seg.numel(); ++i) seg.data()[i] = scene.seg.at(i) / denom;
    return seg;
}

} // namespace

Manifest build_corpus(int n_per_class, int64_t H, int64_t W, int64_t channels, uint64_t seed,
                      const std::string& out_dir, double dog_sigma1, double dog_sigma2, bool previews) {
    CorpusSpec spec;
    spec.n_per_class = n_per_class;
    spec.h = H;
    spec.w = W;
    spec.channels = channels;
    spec.seed = seed;
    spec.out_dir = out_dir;
    spec.dog_sigma1 = dog_sigma1;
    spec.dog_sigma2 = dog_sigma2;
    spec.previews = previews;
    return build_corpus(spec);
}

Manifest build_corpus(const CorpusSpec& spec) {
    if (spec.n_per_class < 1) throw std::invalid_argument("build_corpus: n_per_class must be >= 1");
    std::vector<DegKind> kinds = spec.kinds;
    if (kinds.empty())
        for (int i = 0; i < kNumDegKinds; ++i) kinds.push_back(static_cast<DegKind>(i));
    const std::string& out_dir = spec.out_dir;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::exists(out_dir)) throw std::runtime_error("build_corpus: cannot create output directory " + out_dir);

    Manifest manifest;
    manifest.root = out_dir;
    Rng order_rng(mix_seed(spec.seed, 0x5F5F));
    int index = 0;
    for (int block = 0; block < spec.n_per_class; ++block) {
        // one sample of each class per block, class order shuffled per block;
        // any window of 5 consecutive rows then mixes at least two labels
        std::vector<DegKind> block_kinds = kinds;
        for (size_t i = block_kinds.size() - 1; i > 0; --i)
            std::swap(block_kinds[i], block_kinds[order_rng.next_below(i + 1)]);
        for (DegKind kind : block_kinds) {
            const int label = static_cast<int>(kind);
            const uint64_t sample_seed = mix_seed(spec.seed, static_cast<uint64_t>(index));
            Scene scene = render_scene(sample_seed, spec.h, spec.w, spec.channels);
            Rng deg_rng(mix_seed(sample_seed, 0xD36));
            const double severity = spec.fixed_severity > 0.0 ? spec.fixed_severity : deg_rng.uniform(0.3, 1.0);
            Tensor lq = degrade(scene.image, scene.depth, kind, severity, deg_rng);

            char name[32];
            std::snprintf(name, sizeof(name), "s%05d", index);
            const fs::path dir = fs::path(out_dir) / name;
            fs::create_directories(dir, ec);
            try {
                save_tensor((dir / "gt.t").string(), scene.image);
                save_tensor((dir / "lq.t").string(), lq);
                save_tensor((dir / "depth.t").string(), scene.depth);
                save_tensor((dir / "seg.t").string(), normalized_seg(scene));
                save_tensor((dir / "dog.t").string(), compute_dog(to_grayscale(lq), spec.dog_sigma1, spec.dog_sigma2));
                if (spec.previews) {
                    write_pgm((dir / "gt.pgm").string(), scene.image);
                    write_pgm((dir / "lq.pgm").string(), lq);
                }
            } catch (const std::exception& e) {
                throw std::runtime_error(std::string("build_corpus: write failure under ") + dir.string() + ": " +
                                         e.what());
            }
            SampleRecord rec;
            rec.path = name;
            rec.label = label;
            rec.kind = deg_kind_name(kind);
            rec.severity = severity;
            rec.seed = sample_seed;
            manifest.rows.push_back(rec);
            ++index;
        }
    }

    std::ofstream csv(fs::path(out_dir) / "manifest.csv");
    if (!csv) throw std::runtime_error("build_corpus: cannot write manifest.csv");
    csv << "path,label,kind,severity,seed\n";
    csv.precision(17);
    for (const auto& r : manifest.rows)
        csv << r.path << "," << r.label << "," << r.kind << "," << r.severity << "," << r.seed << "\n";
    return manifest;
}

Manifest load_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw std::runtime_error("cannot open manifest " + manifest_path);
    Manifest m;
    m.root = fs::path(manifest_path).parent_path().string();
    if (m.root.empty()) m.root = ".";
    std::string line;
    if (!std::getline(f, line) || line.rfind("path,label,kind,severity,seed", 0) != 0)
        throw std::runtime_error("manifest missing header row");
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        SampleRecord r;
        std::string field;
        std::getline(ss, r.path, ',');
        std::getline(ss, field, ',');
        r.label = std::stoi(field);
        std::getline(ss, r.kind, ',');
        std::getline(ss, field, ',');
        r.severity = std::stod(field);
        std::getline(ss, field, ',');
        r.seed = std::stoull(field);
        m.rows.push_back(r);
    }
    return m;
}

LoadedSample load_sample(const Manifest& manifest, size_t row) {
    if (row >= manifest.rows.size()) throw std::invalid_argument("sample row out of range");
    const fs::path dir = fs::path(manifest.root) / manifest.rows[row].path;
    LoadedSample s;
    s.gt = load_tensor((dir / "gt.t").string());
    s.lq = load_tensor((dir / "lq.t").string());
    s.cues.depth = load_tensor((dir / "depth.t").string());
    s.cues.seg = load_tensor((dir / "seg.t").string());
    s.cues.dog = load_tensor((dir / "dog.t").string());
    s.label = manifest.rows[row].label;
    return s;
}

void write_pgm(const std::string& path, const Tensor& image) {
    Tensor gray = to_grayscale(image);
    const int64_t H = gray.rank() == 3 ? gray.dim(1) : gray.dim(0);
    const int64_t W = gray.rank() == 3 ? gray.dim(2) : gray.dim(1);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P5\n" << W << " " << H << "\n255\n";
    for (int64_t i = 0; i < H * W; ++i) {
        const double v = std::clamp(gray.at(i), 0.0, 1.0);
        f.put(static_cast<char>(std::lround(v * 255.0)));
    }
}

} // namespace tpg
