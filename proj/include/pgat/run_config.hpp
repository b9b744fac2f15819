#pragma once

#include <cstdint>
#include <string>

#include "pgat/losses.hpp"
#include "pgat/model.hpp"

namespace pgat {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 1;
    int epochs = 5;
    int k_prompts = 3;  // group size used when generating training data
    uint64_t seed = 1;
    int checkpoint_every = 0;  // steps between snapshots; 0 keeps only the final one
    std::string init_checkpoint;  // resume from this checkpoint instead of a fresh init
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
    std::string name = "run";
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    std::string train_data;
    std::string eval_data;
    std::string precision = "f64";  // "f64" or "f32"

    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

// Every field is written explicitly; a persisted config never relies on
// defaults. Round-trips losslessly.
std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig run_config_from_file(const std::string& path);

std::string config_hash(const RunConfig& cfg);

void apply_precision(const RunConfig& cfg);

}  // namespace pgat
