#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pgat/autodiff.hpp"
#include "pgat/prompts.hpp"
#include "pgat/text_encoder.hpp"

namespace pgat {

struct ModelConfig {
    int d_img = 16;          // encoder channel width
    int d_text = kTextDim;   // frozen text embedding width
    int n_candidates = 3;    // candidate masks per prompt
    int k_select = 2;        // candidates kept by top-k aggregation
    int enc_layers = 3;
    int dec_layers = 2;
    double threshold = 0.5;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

struct ParamInfo {
    std::string name;
    ad::Shape shape;
};

// Owns the parameter buffers. Initialization is uniform in +-1/sqrt(fan_in)
// with a fixed draw order, so a seed pins the whole model.
class ModelState {
public:
    ModelState(ModelConfig cfg, uint64_t init_seed);
    ModelState(ModelConfig cfg, std::vector<double> flat);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<ParamInfo>& params() const { return infos_; }
    std::vector<double>& values(const std::string& name);
    const std::vector<double>& values(const std::string& name) const;

    std::vector<double> flatten() const;
    long total_values() const;

    static std::vector<ParamInfo> registry(const ModelConfig& cfg);

private:
    ModelConfig cfg_;
    std::vector<ParamInfo> infos_;
    std::map<std::string, std::vector<double>> buffers_;
};

// Parameters bound as graph leaves for one forward/backward pass.
struct BoundModel {
    ModelConfig cfg;
    std::map<std::string, ad::Tensor> param;

    const ad::Tensor& at(const std::string& name) const;
};

BoundModel bind_model(ad::Graph& g, const ModelState& state, bool requires_grad);

// Per-prompt decoder output.
struct PromptPrediction {
    ad::Tensor candidate_logits;  // [N_c, H, W]
    ad::Tensor candidate_scores;  // [N_c]
    ad::Tensor presence_logit;    // [1]
    ad::Tensor mask_logits;       // [H, W], top-k/max aggregated
};

struct ForwardStats {
    int encoder_runs = 0;
};

// Shared image encoder runs exactly once per group; text encoding, FiLM
// fusion and the decoder run independently per prompt.
std::vector<PromptPrediction> forward_group(ad::Graph& g, const BoundModel& m,
                                            const std::vector<double>& image, int height, int width,
                                            const PromptGroup& group, const TextEncoder& enc,
                                            ForwardStats* stats = nullptr);

PromptPrediction forward_prompt(ad::Graph& g, const BoundModel& m, const std::vector<double>& image,
                                int height, int width, const std::string& text, const TextEncoder& enc,
                                ForwardStats* stats = nullptr);

// Keep the k highest-scoring candidates (ties broken by lower index) and
// take the pixelwise maximum of their logits. The selection itself is a
// constant of the step; gradient flows through the max to the winning
// candidate, ties to the lowest index.
ad::Tensor aggregate_candidates(ad::Tensor candidate_logits, ad::Tensor candidate_scores, int k_select);

// sigmoid(z) >= threshold, threshold in (0,1); the boundary is inclusive
std::vector<uint8_t> predict_mask(const std::vector<double>& logits, double threshold);

// Versioned binary checkpoint: magic + config + flat little-endian f64
// parameters + SHA-256 trailer. Loading verifies the hash and, when an
// expected config is given, rejects mismatches.
void save_checkpoint(const std::string& path, const ModelState& state);
ModelState load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expect = {});

}  // namespace pgat
