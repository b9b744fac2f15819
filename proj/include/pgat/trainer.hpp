#pragma once

#include <string>
#include <vector>

#include "pgat/dataset.hpp"
#include "pgat/losses.hpp"
#include "pgat/model.hpp"
#include "pgat/run_config.hpp"

namespace pgat {

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
};

// Decoupled weight decay, canonical update; the decay multiplies the value
// produced by the adaptive step. Rejects non-finite gradients.
void adamw_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state,
                double lr, double beta1, double beta2, double eps, double weight_decay);

struct StepRecord {
    long step = 0;
    int epoch = 0;
    std::string image_id;
    std::string mask_id;
    LossBreakdown loss;
    double grad_norm = 0.0;
};

struct TrainResult {
    ModelState state;
    std::vector<StepRecord> steps;
    std::string checkpoint_path;  // empty when out_dir was empty
    double wall_seconds = 0.0;
};

// One optimizer step per prompt group per epoch: shuffle the group, run the
// shared-encoder forward, assemble the total loss, backpropagate, update.
// Deterministic given the config seed. With out_dir set, writes config.json,
// steps.jsonl (one JSON object per step, flushed per line), checkpoint.bin
// and summary.json.
TrainResult train(const RunConfig& cfg, const Dataset& data, const std::string& out_dir = "");

}  // namespace pgat
