#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pgat/autodiff.hpp"
#include "pgat/model.hpp"

namespace pgat {

enum class GroupGradMode {
    // relative quality detached, log-weights carry gradient (default; the
    // reading with a training effect)
    WeightsDifferentiable,
    // weights detached as well; the group term becomes a constant of the
    // step and contributes no gradient
    FullyDetached,
};

enum class ConsNorm { MeanPerPixel, Sum };

enum class ConsVariant {
    StopGradReference,  // anchor on the post-shuffle first prompt, gradients blocked
    FullPairwise,       // all-to-all variant kept for the ablation
};

const char* group_grad_mode_name(GroupGradMode m);
const char* cons_norm_name(ConsNorm n);
const char* cons_variant_name(ConsVariant v);
GroupGradMode group_grad_mode_from_name(const std::string& s);
ConsNorm cons_norm_from_name(const std::string& s);
ConsVariant cons_variant_from_name(const std::string& s);

struct LossConfig {
    double temperature = 1.0;        // softmax temperature over negative losses
    double group_weight = 1.0;       // weight of the group regularizer
    double consistency_weight = 0.1; // weight of the consistency penalty
    double dice_smoothing = 1.0;
    GroupGradMode group_grad_mode = GroupGradMode::WeightsDifferentiable;
    ConsNorm cons_norm = ConsNorm::MeanPerPixel;
    ConsVariant cons_variant = ConsVariant::StopGradReference;

    void validate() const;
    bool operator==(const LossConfig&) const = default;
};

struct LossBreakdown {
    std::vector<double> mask_loss;      // per prompt
    std::vector<double> dice_loss;      // per prompt
    std::vector<double> presence_loss;  // per prompt
    std::vector<double> seg_loss;       // per prompt, exact component sum
    std::vector<double> quality;           // q = -seg_loss, detached
    std::vector<double> relative_quality;  // q centered within the group, detached
    std::vector<double> weights;           // softmax over -seg_loss/temperature
    double group_loss = 0.0;
    double consistency_loss = 0.0;
    double total = 0.0;
};

ad::Tensor mask_target_tensor(ad::Graph& g, const std::vector<uint8_t>& mask, int height, int width);

// mean per-pixel binary cross-entropy on sigmoid(logits); stable for |z|
// up to 1e3; rejects non-binary targets
ad::Tensor mask_loss(ad::Tensor logits, ad::Tensor target);

// 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps), p = sigmoid(logits). eps may be
// zero for oracle evaluations; persisted configs require it positive.
ad::Tensor dice_loss(ad::Tensor logits, ad::Tensor target, double eps);

// cross-entropy of sigmoid(presence_logit) against mask non-emptiness
ad::Tensor presence_loss(ad::Tensor presence_logit, const std::vector<uint8_t>& target_mask);

struct SegLossParts {
    ad::Tensor mask;
    ad::Tensor dice;
    ad::Tensor presence;
    ad::Tensor total;  // mask + dice + presence, in that order
};

// computed on the aggregated logits, i.e. through the same top-k/max path
// that inference uses
SegLossParts seg_loss(const PromptPrediction& pred, ad::Tensor target,
                      const std::vector<uint8_t>& target_mask, double dice_eps);

// q = -loss, centered within the group; detached from the graph by
// construction (plain values). Exact zeros for equal losses.
void prompt_quality(const std::vector<double>& seg_losses, std::vector<double>& quality,
                    std::vector<double>& relative_quality);

// softmax(-loss/temperature) with max-subtraction; in FullyDetached mode the
// inputs are wrapped in stop_gradient first
ad::Tensor quality_weights(const std::vector<ad::Tensor>& seg_losses, double temperature,
                           GroupGradMode mode);
std::vector<double> quality_weight_values(const std::vector<double>& losses, double temperature);

// -sum_i q_rel[i] * log(w[i]); rejects any exactly-zero weight. For softmax
// weights this equals -(1/temperature) * sum q_rel^2 up to roundoff.
ad::Tensor group_loss(const std::vector<double>& relative_quality, ad::Tensor weights);
double group_loss_closed_form(const std::vector<double>& relative_quality, double temperature);

// StopGradReference: mean over i>=1 of ||Z_i - stopgrad(Z_0)||^2;
// FullPairwise: (2/(K(K-1))) sum_{i<j} ||Z_i - Z_j||^2, no stop-gradient.
// MeanPerPixel divides each squared norm by H*W.
ad::Tensor consistency_loss(const std::vector<ad::Tensor>& mask_logits, ConsNorm norm,
                            ConsVariant variant);

struct TotalLossResult {
    ad::Tensor total;
    LossBreakdown breakdown;
};

// mean seg loss + group_weight * group term + consistency_weight *
// consistency term. preds[0] is the consistency reference (callers shuffle
// the group before the forward pass). Zero-weight terms are skipped, so the
// degenerate config reduces exactly to the mean seg loss.
TotalLossResult total_loss(ad::Graph& g, const std::vector<PromptPrediction>& preds,
                           const std::vector<uint8_t>& target_mask, int height, int width,
                           const LossConfig& cfg);

}  // namespace pgat
