#ifndef TPG_SYNTH_H
#define TPG_SYNTH_H

#include "tpg/rng.h"
#include "tpg/structural.h"
#include "tpg/tensor.h"

#include <string>
#include <vector>

namespace tpg {

// Procedurally rendered scene: anti-aliased shapes over a gradient background
// with exact depth and segment maps from the compositing order.
struct Scene {
    Tensor image; // [C,H,W] in [0,1]
    Tensor depth; // [1,H,W] in [0,1], smaller = nearer
    Tensor seg;   // [1,H,W] integer labels 0 (background) .. n_shapes
    int n_shapes = 0;
    uint64_t seed = 0;
};

Scene render_scene(uint64_t seed, int64_t H, int64_t W, int64_t channels = 1);

enum class DegKind { Noise = 0, Rain = 1, Haze = 2, Lowlight = 3, Blur = 4 };
constexpr int kNumDegKinds = 5;
const char* deg_kind_name(DegKind k);
DegKind deg_kind_from_label(int label);
DegKind deg_kind_from_name(const std::string& name);

// Parametric corruption models. Each keeps the output inside [0,1].
Tensor apply_noise(const Tensor& x, double sigma, Rng& rng);
Tensor apply_rain(const Tensor& x, double density, Rng& rng);
Tensor apply_haze(const Tensor& x, const Tensor& depth, double beta, double airlight);
Tensor apply_lowlight(const Tensor& x, double gamma, double gain, double shot_noise, Rng& rng);
Tensor apply_blur(const Tensor& x, int length, double angle, Rng& rng);

// severity in (0,1] maps to the per-kind parameter ranges
double noise_sigma_for_severity(double severity);
Tensor degrade(const Tensor& x_gt, const Tensor& depth, DegKind kind, double severity, Rng& rng);

struct SampleRecord {
    std::string path; // sample directory, relative to the manifest
    int label = 0;
    std::string kind;
    double severity = 0.0;
    uint64_t seed = 0;
};

struct Manifest {
    std::string root; // directory holding manifest.csv
    std::vector<SampleRecord> rows;
};

struct CorpusSpec {
    int n_per_class = 50;
    int64_t h = 16;
    int64_t w = 16;
    int64_t channels = 1;
    uint64_t seed = 0;
    std::string out_dir;
    double dog_sigma1 = 1.0;
    double dog_sigma2 = 2.0;
    bool previews = false;
    std::vector<DegKind> kinds;  // empty selects all five classes
    double fixed_severity = -1.0; // < 0 draws severities from [0.3, 1]
};

// Balanced corpus written as per-sample directories with gt.t, lq.t,
// depth.t, seg.t, dog.t plus manifest.csv. Deterministic in `seed`.
Manifest build_corpus(const CorpusSpec& spec);
Manifest build_corpus(int n_per_class, int64_t H, int64_t W, int64_t channels, uint64_t seed,
                      const std::string& out_dir, double dog_sigma1 = 1.0, double dog_sigma2 = 2.0,
                      bool previews = false);

Manifest load_manifest(const std::string& manifest_path);

struct LoadedSample {
    Tensor gt;
    Tensor lq;
    StructuralCues cues;
    int label = 0;
};

LoadedSample load_sample(const Manifest& manifest, size_t row);

// 8-bit binary PGM preview of a [1,H,W] or [C,H,W] tensor (channel mean)
void write_pgm(const std::string& path, const Tensor& image);

} // namespace tpg

#endif
