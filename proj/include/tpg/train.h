#ifndef TPG_TRAIN_H
#define TPG_TRAIN_H

#include "tpg/checkpoint.h"
#include "tpg/config.h"
#include "tpg/degradation.h"
#include "tpg/denoiser.h"
#include "tpg/metrics.h"
#include "tpg/sde.h"
#include "tpg/semantic.h"
#include "tpg/structural.h"
#include "tpg/synth.h"

#include <map>
#include <string>
#include <vector>

namespace tpg {

// Every model the pipeline needs, built deterministically from one config.
struct ModelSet {
    RunConfig cfg;
    SdeSchedule sched;
    SemanticPrior sem;
    DegradationPrior deg;
    StructuralPrior structp;
    Denoiser unet;

    explicit ModelSet(const RunConfig& cfg);

    InjectionFlags flags() const;
    PriorBundle extract_priors(const Tensor& x_lq, const StructuralCues& cues, const InjectionFlags& f) const;

    ParamStore all_params() const;
    ParamStore stage1_params() const; // semantic student + degradation encoder/head
    ParamStore stage2_params() const; // denoiser, structural branch, context proj, time modulator
    void freeze_stage1_modules();
    void set_grad_enabled(bool enabled);

    void load_from_checkpoint(const std::string& path, int expect_stage = -1);
};

Tensor restore_image(const ModelSet& models, const Tensor& x_lq, const StructuralCues& cues, Rng& rng,
                     bool stochastic);

struct EvalRow {
    size_t index = 0;
    int label = 0;
    double psnr_val = 0.0;
    double ssim_val = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double identity_psnr = 0.0; // PSNR(x_lq, x_gt) over the same rows
    std::map<int, double> class_psnr;
};

void write_eval_csv(const EvalReport& report, const std::string& path);
EvalReport read_eval_csv(const std::string& path);

struct DataSplit {
    std::vector<size_t> train;
    std::vector<size_t> heldout;
};
DataSplit split_manifest(const Manifest& manifest, double heldout_frac);

struct Stage1Result {
    double sem_first = 0.0, sem_last = 0.0; // first/last 100-step loss averages
    double deg_first = 0.0, deg_last = 0.0;
    double heldout_accuracy = 0.0;
    double cos_before = 0.0, cos_after = 0.0;
    std::string ckpt_path;
};
Stage1Result run_stage1(const RunConfig& cfg);

struct Stage2Result {
    double loss_first = 0.0, loss_last = 0.0;
    EvalReport eval;
    std::string ckpt_path;
};
Stage2Result run_stage2(const RunConfig& cfg, const std::string& stage1_ckpt);

EvalReport evaluate_manifest(ModelSet& models, const Manifest& manifest, const std::vector<size_t>& rows,
                             uint64_t rng_salt = 0xE7A1);

// Loads a checkpoint and evaluates manifest rows (all, or the first `limit`).
EvalReport evaluate_checkpoint(const RunConfig& cfg, const std::string& ckpt_path,
                               const std::string& manifest_path, int limit = -1);

struct AblationCell {
    std::string name;
    std::map<std::string, std::string> overrides;
};

struct AblationRow {
    std::string cell;
    uint64_t seed = 0;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

std::vector<AblationCell> ablation_suite(const std::string& suite_name);
std::vector<AblationRow> run_ablation_cells(const RunConfig& base, const std::vector<AblationCell>& cells,
                                            const std::vector<uint64_t>& seeds);
std::string format_ablation_report(const std::vector<AblationRow>& rows);

} // namespace tpg

#endif
