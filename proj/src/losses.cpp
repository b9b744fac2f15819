#include "pgat/losses.hpp"

#include <algorithm>
#include <cmath>

#include "pgat/errors.hpp"

namespace pgat {

const char* group_grad_mode_name(GroupGradMode m) {
    return m == GroupGradMode::WeightsDifferentiable ? "weights_differentiable" : "fully_detached";
}
const char* cons_norm_name(ConsNorm n) { return n == ConsNorm::MeanPerPixel ? "mean_per_pixel" : "sum"; }
const char* cons_variant_name(ConsVariant v) {
    return v == ConsVariant::StopGradReference ? "stopgrad_reference" : "full_pairwise";
}

GroupGradMode group_grad_mode_from_name(const std::string& s) {
    if (s == "weights_differentiable") return GroupGradMode::WeightsDifferentiable;
    if (s == "fully_detached") return GroupGradMode::FullyDetached;
    throw ValidationError("unknown group grad mode '" + s + "'");
}
ConsNorm cons_norm_from_name(const std::string& s) {
    if (s == "mean_per_pixel") return ConsNorm::MeanPerPixel;
    if (s == "sum") return ConsNorm::Sum;
    throw ValidationError("unknown consistency norm '" + s + "'");
}
ConsVariant cons_variant_from_name(const std::string& s) {
    if (s == "stopgrad_reference") return ConsVariant::StopGradReference;
    if (s == "full_pairwise") return ConsVariant::FullPairwise;
    throw ValidationError("unknown consistency variant '" + s + "'");
}

void LossConfig::validate() const {
    if (temperature <= 0.0) throw ValidationError("temperature must be positive");
    if (group_weight < 0.0) throw ValidationError("group weight must be non-negative");
    if (consistency_weight < 0.0) throw ValidationError("consistency weight must be non-negative");
    if (dice_smoothing <= 0.0) throw ValidationError("dice smoothing must be positive");
}

ad::Tensor mask_target_tensor(ad::Graph& g, const std::vector<uint8_t>& mask, int height, int width) {
    if (int(mask.size()) != height * width) throw ValidationError("mask buffer does not match extents");
    std::vector<double> t(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] > 1) throw ValidationError("target mask must be binary");
        t[i] = double(mask[i]);
    }
    return g.constant(std::move(t), {height, width});
}

namespace {

void require_binary(const ad::Tensor& target) {
    for (double v : target.values())
        if (v != 0.0 && v != 1.0) throw ValidationError("target mask must be binary (0/1)");
}

void require_same_shape(const ad::Tensor& a, const ad::Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ValidationError(std::string(what) + ": shape mismatch " + ad::shape_str(a.shape()) +
                              " vs " + ad::shape_str(b.shape()));
}

// numerically stable cross-entropy with logits:
//   bce(z,t) = relu(z) - z*t + log(1 + exp(-|z|))
ad::Tensor bce_with_logits(ad::Tensor z, ad::Tensor t) {
    ad::Graph& g = *z.graph;
    ad::Tensor neg_z = ad::sub(g.scalar(0.0), z);
    ad::Tensor abs_z = ad::add(ad::relu(z), ad::relu(neg_z));
    ad::Tensor soft = ad::log(ad::add(g.scalar(1.0), ad::exp(ad::sub(g.scalar(0.0), abs_z))));
    return ad::add(ad::sub(ad::relu(z), ad::mul(z, t)), soft);
}

}  // namespace

ad::Tensor mask_loss(ad::Tensor logits, ad::Tensor target) {
    require_same_shape(logits, target, "mask_loss");
    require_binary(target);
    return ad::mean(bce_with_logits(logits, target));
}

ad::Tensor dice_loss(ad::Tensor logits, ad::Tensor target, double eps) {
    require_same_shape(logits, target, "dice_loss");
    require_binary(target);
    if (eps < 0.0) throw ValidationError("dice smoothing must be non-negative");
    ad::Graph& g = *logits.graph;
    ad::Tensor p = ad::sigmoid(logits);
    ad::Tensor inter = ad::sum(ad::mul(p, target));
    ad::Tensor denom = ad::add(ad::sum(p), ad::sum(target));
    ad::Tensor ratio = ad::div(ad::add(ad::mul(inter, g.scalar(2.0)), g.scalar(eps)),
                               ad::add(denom, g.scalar(eps)));
    return ad::sub(g.scalar(1.0), ratio);
}

ad::Tensor presence_loss(ad::Tensor presence_logit, const std::vector<uint8_t>& target_mask) {
    if (presence_logit.size() != 1) throw ValidationError("presence logit must be a scalar");
    ad::Graph& g = *presence_logit.graph;
    bool present = std::any_of(target_mask.begin(), target_mask.end(), [](uint8_t v) { return v != 0; });
    ad::Tensor t = g.scalar(present ? 1.0 : 0.0);
    return bce_with_logits(presence_logit, t);
}

SegLossParts seg_loss(const PromptPrediction& pred, ad::Tensor target,
                      const std::vector<uint8_t>& target_mask, double dice_eps) {
    SegLossParts parts;
    parts.mask = mask_loss(pred.mask_logits, target);
    parts.dice = dice_loss(pred.mask_logits, target, dice_eps);
    parts.presence = presence_loss(pred.presence_logit, target_mask);
    parts.total = ad::add(ad::add(parts.mask, parts.dice), parts.presence);
    return parts;
}

void prompt_quality(const std::vector<double>& seg_losses, std::vector<double>& quality,
                    std::vector<double>& relative_quality) {
    size_t k = seg_losses.size();
    if (k < 2) throw ValidationError("prompt quality needs at least 2 prompts");
    for (double l : seg_losses)
        if (!std::isfinite(l)) throw ValidationError("non-finite segmentation loss");
    quality.resize(k);
    relative_quality.resize(k);
    for (size_t i = 0; i < k; ++i) quality[i] = -seg_losses[i];
    // centering via pairwise differences keeps equal inputs at exact zero
    for (size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < k; ++j) acc += quality[i] - quality[j];
        relative_quality[i] = acc / double(k);
    }
}

ad::Tensor quality_weights(const std::vector<ad::Tensor>& seg_losses, double temperature,
                           GroupGradMode mode) {
    if (temperature <= 0.0) throw ValidationError("temperature must be positive");
    if (seg_losses.empty()) throw ValidationError("quality weights need at least one loss");
    ad::Graph& g = *seg_losses[0].graph;
    ad::Tensor stack = ad::concat(seg_losses);
    if (mode == GroupGradMode::FullyDetached) stack = ad::stop_gradient(stack);
    return ad::softmax_last(ad::div(stack, g.scalar(-temperature)));
}

std::vector<double> quality_weight_values(const std::vector<double>& losses, double temperature) {
    if (temperature <= 0.0) throw ValidationError("temperature must be positive");
    if (losses.empty()) throw ValidationError("quality weights need at least one loss");
    // softmax of -loss/temperature with max-subtraction
    std::vector<double> x(losses.size());
    for (size_t i = 0; i < losses.size(); ++i) x[i] = -losses[i] / temperature;
    double m = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double& v : x) {
        v = std::exp(v - m);
        s += v;
    }
    for (double& v : x) v /= s;
    return x;
}

ad::Tensor group_loss(const std::vector<double>& relative_quality, ad::Tensor weights) {
    if (int(relative_quality.size()) != weights.size())
        throw ValidationError("group loss: quality and weight lengths differ");
    for (double w : weights.values())
        if (w <= 0.0) throw ValidationError("group loss: weight underflowed to zero");
    ad::Graph& g = *weights.graph;
    ad::Tensor q = g.constant(relative_quality, {int(relative_quality.size())});
    return ad::sub(g.scalar(0.0), ad::sum(ad::mul(q, ad::log(weights))));
}

double group_loss_closed_form(const std::vector<double>& relative_quality, double temperature) {
    double acc = 0.0;
    for (double q : relative_quality) acc += q * q;
    return -acc / temperature;
}

ad::Tensor consistency_loss(const std::vector<ad::Tensor>& mask_logits, ConsNorm norm,
                            ConsVariant variant) {
    size_t k = mask_logits.size();
    if (k < 2) throw ValidationError("consistency loss needs at least 2 prompts");
    for (size_t i = 1; i < k; ++i)
        require_same_shape(mask_logits[i], mask_logits[0], "consistency_loss");
    ad::Graph& g = *mask_logits[0].graph;
    double pixel_norm = norm == ConsNorm::MeanPerPixel ? double(mask_logits[0].size()) : 1.0;

    ad::Tensor acc = g.scalar(0.0);
    double scale;
    if (variant == ConsVariant::StopGradReference) {
        ad::Tensor ref = ad::stop_gradient(mask_logits[0]);
        for (size_t i = 1; i < k; ++i)
            acc = ad::add(acc, ad::squared_l2(ad::sub(mask_logits[i], ref)));
        scale = 1.0 / (double(k - 1) * pixel_norm);
    } else {
        for (size_t i = 0; i < k; ++i)
            for (size_t j = i + 1; j < k; ++j)
                acc = ad::add(acc, ad::squared_l2(ad::sub(mask_logits[i], mask_logits[j])));
        scale = 2.0 / (double(k) * double(k - 1) * pixel_norm);
    }
    return ad::mul(acc, g.scalar(scale));
}

TotalLossResult total_loss(ad::Graph& g, const std::vector<PromptPrediction>& preds,
                           const std::vector<uint8_t>& target_mask, int height, int width,
                           const LossConfig& cfg) {
    if (preds.empty()) throw ValidationError("total loss needs at least one prediction");
    if (cfg.temperature <= 0.0) throw ValidationError("temperature must be positive");
    size_t k = preds.size();
    bool use_group = cfg.group_weight > 0.0;
    bool use_cons = cfg.consistency_weight > 0.0;
    if (k < 2 && (use_group || use_cons))
        throw ValidationError("group and consistency terms need at least 2 prompts");

    ad::Tensor target = mask_target_tensor(g, target_mask, height, width);

    TotalLossResult res;
    std::vector<ad::Tensor> seg_tensors;
    std::vector<ad::Tensor> logits;
    seg_tensors.reserve(k);
    for (const auto& pred : preds) {
        SegLossParts parts = seg_loss(pred, target, target_mask, cfg.dice_smoothing);
        res.breakdown.mask_loss.push_back(parts.mask.scalar());
        res.breakdown.dice_loss.push_back(parts.dice.scalar());
        res.breakdown.presence_loss.push_back(parts.presence.scalar());
        res.breakdown.seg_loss.push_back(parts.total.scalar());
        seg_tensors.push_back(parts.total);
        logits.push_back(pred.mask_logits);
    }

    ad::Tensor total = ad::mean(ad::concat(seg_tensors));

    if (k >= 2) {
        prompt_quality(res.breakdown.seg_loss, res.breakdown.quality, res.breakdown.relative_quality);
        if (use_group) {
            ad::Tensor w = quality_weights(seg_tensors, cfg.temperature, cfg.group_grad_mode);
            res.breakdown.weights = w.values();
            ad::Tensor lg = group_loss(res.breakdown.relative_quality, w);
            res.breakdown.group_loss = lg.scalar();
            total = ad::add(total, ad::mul(lg, g.scalar(cfg.group_weight)));
        } else {
            res.breakdown.weights = quality_weight_values(res.breakdown.seg_loss, cfg.temperature);
        }
        if (use_cons) {
            ad::Tensor lc = consistency_loss(logits, cfg.cons_norm, cfg.cons_variant);
            res.breakdown.consistency_loss = lc.scalar();
            total = ad::add(total, ad::mul(lc, g.scalar(cfg.consistency_weight)));
        }
    } else {
        res.breakdown.quality = {-res.breakdown.seg_loss[0]};
        res.breakdown.relative_quality = {0.0};
        res.breakdown.weights = {1.0};
    }

    res.total = total;
    res.breakdown.total = total.scalar();
    return res;
}

}  // namespace pgat
