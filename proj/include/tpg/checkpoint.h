#ifndef TPG_CHECKPOINT_H
#define TPG_CHECKPOINT_H

#include "tpg/config.h"
#include "tpg/nn.h"
#include "tpg/tensor.h"

#include <string>
#include <vector>

namespace tpg {

// Unified checkpoint: header (stage, step, config fingerprint, config text)
// followed by named parameter records in the tensor container format.
struct Checkpoint {
    uint32_t stage = 0;
    uint64_t step = 0;
    uint64_t fingerprint = 0;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(uint32_t stage, uint64_t step, const RunConfig& cfg, const ParamStore& params);

// Copies checkpoint values into the store; throws when the architecture
// fingerprint disagrees (message lists the differing keys) or when names or
// shapes fail to line up.
void restore_params(const Checkpoint& ckpt, const RunConfig& active_cfg, ParamStore& store);

} // namespace tpg

#endif
