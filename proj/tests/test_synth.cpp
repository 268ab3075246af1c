#include <doctest.h>

#include "tpg/metrics.h"
#include "tpg/synth.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using namespace tpg;

TEST_CASE("scene rendering: determinism, range, labels") {
    Scene a = render_scene(42, 24, 24);
    Scene b = render_scene(42, 24, 24);
    CHECK(a.image.vec() == b.image.vec());
    CHECK(a.depth.vec() == b.depth.vec());
    CHECK(a.seg.vec() == b.seg.vec());

    for (int64_t i = 0; i < a.image.numel(); ++i) {
        CHECK(a.image.at(i) >= 0.0);
        CHECK(a.image.at(i) <= 1.0);
    }

    // all labels visible: shapes + background
    std::set<int> labels;
    for (int64_t i = 0; i < a.seg.numel(); ++i) labels.insert(static_cast<int>(a.seg.at(i)));
    CHECK(static_cast<int>(labels.size()) == a.n_shapes + 1);
}

TEST_CASE("depth map is consistent with compositing order") {
    // the visible shape at a pixel is the last one composited there; its
    // depth must be the value stored, and depth strictly decreases with
    // composite order, so overlap pixels always carry the nearer value
    for (uint64_t seed : {1, 7, 19}) {
        Scene s = render_scene(seed, 24, 24);
        std::vector<double> depth_of_label(static_cast<size_t>(s.n_shapes) + 1, 1.0);
        for (int k = 1; k <= s.n_shapes; ++k)
            depth_of_label[k] = 0.9 - 0.8 * static_cast<double>(k) / (s.n_shapes + 1.0);
        for (int k = 2; k <= s.n_shapes; ++k) CHECK(depth_of_label[k] < depth_of_label[k - 1]);
        for (int64_t i = 0; i < s.seg.numel(); ++i) {
            const int label = static_cast<int>(s.seg.at(i));
            CHECK(s.depth.at(i) == depth_of_label[static_cast<size_t>(label)]);
        }
    }
}

TEST_CASE("render_scene rejects unsupported extents") {
    CHECK_THROWS_AS(render_scene(1, 4, 4), std::invalid_argument);
    CHECK_THROWS_AS(render_scene(1, 128, 128), std::invalid_argument);
}

TEST_CASE("haze: beta=0 is identity, opaque haze is pure airlight") {
    Scene s = render_scene(5, 16, 16);
    Tensor same = apply_haze(s.image, s.depth, 0.0, 0.9);
    CHECK(same.vec() == s.image.vec());

    Tensor far = Tensor::full({1, 16, 16}, 1.0);
    Tensor white = apply_haze(s.image, far, 1e9, 0.83);
    for (int64_t i = 0; i < white.numel(); ++i) CHECK(white.at(i) == 0.83);
}

TEST_CASE("haze scattering identity recovers the clean image") {
    Scene s = render_scene(11, 24, 24);
    const double beta = 1.6, airlight = 0.87;
    Tensor hazed = apply_haze(s.image, s.depth, beta, airlight);
    for (int64_t i = 0; i < s.image.numel(); ++i) {
        const double t = std::exp(-beta * s.depth.at(i % (24 * 24)));
        if (t <= 0.1) continue;
        const double recovered = (hazed.at(i) - airlight * (1.0 - t)) / t;
        CHECK(std::fabs(recovered - s.image.at(i)) < 1e-10);
    }
}

TEST_CASE("noise level matches the requested sigma") {
    Rng rng(31);
    Tensor mid = Tensor::full({1, 100, 100}, 0.5);
    Tensor noisy = apply_noise(mid, 0.1, rng);
    double s2 = 0.0;
    for (int64_t i = 0; i < noisy.numel(); ++i) {
        const double d = noisy.at(i) - 0.5;
        s2 += d * d;
    }
    const double sd = std::sqrt(s2 / noisy.numel());
    CHECK(sd == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("all degradations stay in range and actually change the image") {
    Scene s = render_scene(13, 16, 16);
    Rng rng(17);
    for (int k = 0; k < kNumDegKinds; ++k) {
        Tensor lq = degrade(s.image, s.depth, static_cast<DegKind>(k), 0.8, rng);
        REQUIRE(lq.shape() == s.image.shape());
        for (int64_t i = 0; i < lq.numel(); ++i) {
            CHECK(lq.at(i) >= 0.0);
            CHECK(lq.at(i) <= 1.0);
        }
        CHECK(std::isfinite(psnr(lq, s.image)));
    }
    CHECK_THROWS_AS(degrade(s.image, s.depth, static_cast<DegKind>(0), 0.0, rng), std::invalid_argument);
}

TEST_CASE("degradation kind names round-trip and reject unknowns") {
    for (int i = 0; i < kNumDegKinds; ++i)
        CHECK(deg_kind_from_name(deg_kind_name(static_cast<DegKind>(i))) == static_cast<DegKind>(i));
    CHECK_THROWS_AS(deg_kind_from_name("fog"), std::invalid_argument);
    CHECK_THROWS_AS(deg_kind_from_label(5), std::invalid_argument);
    CHECK_THROWS_AS(deg_kind_from_label(-1), std::invalid_argument);
}

TEST_CASE("corpus construction: balance, determinism, cue consistency") {
    const std::string dir1 = (fs::temp_directory_path() / "tpg_corpus_a").string();
    const std::string dir2 = (fs::temp_directory_path() / "tpg_corpus_b").string();
    fs::remove_all(dir1);
    fs::remove_all(dir2);

    CorpusSpec spec;
    spec.n_per_class = 4;
    spec.h = 16;
    spec.w = 16;
    spec.seed = 99;
    spec.out_dir = dir1;
    Manifest m = build_corpus(spec);
    CHECK(m.rows.size() == 20);
    int counts[5] = {0, 0, 0, 0, 0};
    for (const auto& r : m.rows) counts[r.label]++;
    for (int c : counts) CHECK(c == 4);

    // rebuild bit-identically
    spec.out_dir = dir2;
    build_corpus(spec);
    for (const char* f : {"s00000/gt.t", "s00007/lq.t", "s00013/dog.t"}) {
        std::ifstream a(fs::path(dir1) / f, std::ios::binary), b(fs::path(dir2) / f, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }

    // reload through the manifest and verify invariants
    Manifest loaded = load_manifest(dir1 + "/manifest.csv");
    REQUIRE(loaded.rows.size() == 20);
    for (size_t i = 0; i < loaded.rows.size(); i += 7) {
        LoadedSample s = load_sample(loaded, i);
        for (int64_t j = 0; j < s.lq.numel(); ++j) {
            CHECK(s.lq.at(j) >= 0.0);
            CHECK(s.lq.at(j) <= 1.0);
        }
        CHECK(std::isfinite(psnr(s.lq, s.gt)));
        // stored band-pass cue equals recomputing it from the stored input
        Tensor dog = compute_dog(to_grayscale(s.lq), 1.0, 2.0);
        CHECK(dog.vec() == s.cues.dog.vec());
    }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("shuffled manifest keeps labels mixed in every window of five") {
    for (uint64_t seed : {3, 17, 90001}) {
        const std::string dir = (fs::temp_directory_path() / ("tpg_corpus_w" + std::to_string(seed))).string();
        fs::remove_all(dir);
        CorpusSpec spec;
        spec.n_per_class = 6;
        spec.h = 8;
        spec.w = 8;
        spec.seed = seed;
        spec.out_dir = dir;
        Manifest m = build_corpus(spec);
        for (size_t start = 0; start + 5 <= m.rows.size(); ++start) {
            std::set<int> window;
            for (size_t i = start; i < start + 5; ++i) window.insert(m.rows[i].label);
            CHECK(window.size() >= 2);
        }
        fs::remove_all(dir);
    }
}

TEST_CASE("kind-restricted corpus with fixed severity") {
    const std::string dir = (fs::temp_directory_path() / "tpg_corpus_noise").string();
    fs::remove_all(dir);
    CorpusSpec spec;
    spec.n_per_class = 3;
    spec.h = 16;
    spec.w = 16;
    spec.seed = 5;
    spec.out_dir = dir;
    spec.kinds = {DegKind::Noise};
    spec.fixed_severity = 1.0 / 3.0; // sigma = 0.1
    Manifest m = build_corpus(spec);
    CHECK(m.rows.size() == 3);
    for (const auto& r : m.rows) {
        CHECK(r.kind == "noise");
        CHECK(r.severity == doctest::Approx(1.0 / 3.0));
    }
    CHECK(noise_sigma_for_severity(1.0 / 3.0) == doctest::Approx(0.1).epsilon(1e-12));
    fs::remove_all(dir);
}

TEST_CASE("pgm preview writer emits a valid header") {
    Scene s = render_scene(2, 8, 8);
    const std::string path = (fs::temp_directory_path() / "tpg_preview.pgm").string();
    write_pgm(path, s.image);
    std::ifstream f(path, std::ios::binary);
    std::string magic;
    f >> magic;
    CHECK(magic == "P5");
    int w, h, maxv;
    f >> w >> h >> maxv;
    CHECK(w == 8);
    CHECK(h == 8);
    CHECK(maxv == 255);
    fs::remove(path);
}
