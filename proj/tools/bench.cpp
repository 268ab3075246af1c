// rough per-component timing at the desk-scale training configuration
#include "tpg/train.h"

#include <chrono>
#include <iostream>

using namespace tpg;
using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

int main() {
    RunConfig cfg = RunConfig::defaults();
    cfg.set("model.base", "16");
    cfg.set("data.h", "16");
    cfg.set("data.w", "16");
    ModelSet models(cfg);
    models.set_grad_enabled(true);

    Scene scene = render_scene(3, 16, 16, 1);
    StructuralCues cues{scene.depth, scene.seg, compute_dog(to_grayscale(scene.image), 1.0, 2.0)};
    InjectionFlags flags;
    PriorBundle bundle = models.extract_priors(scene.image, cues, flags);
    Rng rng(1);
    auto [x_t, eps] = sample_forward(models.sched, scene.image, scene.image, 50, rng);

    const int reps = 30;
    {
        auto t0 = Clock::now();
        for (int i = 0; i < reps; ++i) (void)models.structp.extract(cues);
        std::cout << "struct extract fwd: " << ms_since(t0) / reps << " ms\n";
    }
    {
        auto t0 = Clock::now();
        for (int i = 0; i < reps; ++i)
            (void)models.unet.forward(x_t, scene.image, 50, bundle, &models.deg.modulator, flags);
        std::cout << "unet fwd (tape):    " << ms_since(t0) / reps << " ms\n";
    }
    {
        auto t0 = Clock::now();
        for (int i = 0; i < reps; ++i) {
            Tensor z = models.structp.extract(cues);
            PriorBundle b2{bundle.sem_context, z, bundle.deg};
            Tensor out = models.unet.forward(x_t, scene.image, 50, b2, &models.deg.modulator, flags);
            Tensor loss = l1_loss(out, eps);
            loss.backward();
        }
        std::cout << "full fwd+bwd:       " << ms_since(t0) / reps << " ms\n";
    }
    models.set_grad_enabled(false);
    {
        auto t0 = Clock::now();
        for (int i = 0; i < reps; ++i)
            (void)models.unet.forward(x_t, scene.image, 50, bundle, &models.deg.modulator, flags);
        std::cout << "unet fwd (no tape): " << ms_since(t0) / reps << " ms\n";
    }
    return 0;
}
