#include <doctest.h>

#include <cmath>
#include <vector>

#include "pgat/errors.hpp"
#include "pgat/gradcheck.hpp"
#include "pgat/losses.hpp"
#include "pgat/model.hpp"
#include "pgat/rng.hpp"

using namespace pgat;

namespace {

// wrap raw logits as a one-candidate prediction routed through the same
// aggregation path the model uses
PromptPrediction pred_from_logits(ad::Graph& g, const std::vector<double>& logits, int h, int w,
                                  double presence) {
    PromptPrediction p;
    p.candidate_logits = g.leaf(logits, {1, h, w}, true);
    p.candidate_scores = g.constant({1.0}, {1});
    p.presence_logit = g.leaf({presence}, {1}, true);
    p.mask_logits = aggregate_candidates(p.candidate_logits, p.candidate_scores, 1);
    return p;
}

double bce_oracle(double z, double t) {
    // direct, numerically naive reference for moderate z
    double p = 1.0 / (1.0 + std::exp(-z));
    return -t * std::log(p) - (1.0 - t) * std::log(1.0 - p);
}

}  // namespace

TEST_CASE("mask loss at zero logits is ln 2 for any binary target") {
    for (std::vector<uint8_t> target : {std::vector<uint8_t>{0, 0, 0, 0}, {1, 1, 1, 1}, {1, 0, 1, 0}}) {
        ad::Graph g;
        ad::Tensor z = g.constant_like(0.0, {2, 2});
        ad::Tensor t = mask_target_tensor(g, target, 2, 2);
        CHECK(mask_loss(z, t).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
}

TEST_CASE("saturated correct logits drive the mask loss to zero") {
    ad::Graph g;
    std::vector<uint8_t> target = {1, 0, 0, 1};
    std::vector<double> z = {100, -100, -100, 100};
    ad::Tensor t = mask_target_tensor(g, target, 2, 2);
    CHECK(mask_loss(g.leaf(z, {2, 2}, false), t).scalar() <= 1e-6);
}

TEST_CASE("flipping one target pixel at saturated logits changes the loss by the per-pixel oracle") {
    // per-pixel decomposition: the flipped pixel's term goes from ~0 to
    // |z|, so the mean moves by |z|/n
    const int n = 64;
    std::vector<uint8_t> target(n, 1);
    std::vector<double> z(n, 100.0);

    ad::Graph g;
    double before = mask_loss(g.leaf(z, {8, 8}, false), mask_target_tensor(g, target, 8, 8)).scalar();
    target[13] = 0;
    double after = mask_loss(g.leaf(z, {8, 8}, false), mask_target_tensor(g, target, 8, 8)).scalar();

    double oracle_delta = 100.0 / double(n);  // bce(100,0) - bce(100,1) = 100 + O(e^-100)
    CHECK(after - before == doctest::Approx(oracle_delta).epsilon(1e-9));
}

TEST_CASE("mask loss is stable and exact for |z| up to 1e3") {
    ad::Graph g;
    std::vector<uint8_t> target(4, 0);
    ad::Tensor t = mask_target_tensor(g, target, 2, 2);
    ad::Tensor z = g.leaf({1000, 1000, 1000, 1000}, {2, 2}, true);
    ad::Tensor loss = mask_loss(z, t);
    CHECK(loss.scalar() == 1000.0);
    auto grads = g.backward(loss);
    for (double v : grads.at(z.id)) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("mask loss matches a naive BCE oracle at moderate logits") {
    Rng rng(4);
    std::vector<double> z(16);
    std::vector<uint8_t> target(16);
    for (size_t i = 0; i < z.size(); ++i) {
        z[i] = rng.uniform(-8, 8);
        target[i] = rng.below(2) ? 1 : 0;
    }
    double expect = 0.0;
    for (size_t i = 0; i < z.size(); ++i) expect += bce_oracle(z[i], target[i]);
    expect /= double(z.size());

    ad::Graph g;
    double got = mask_loss(g.leaf(z, {4, 4}, false), mask_target_tensor(g, target, 4, 4)).scalar();
    CHECK(got == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("mask loss rejects non-binary targets and shape mismatches") {
    ad::Graph g;
    ad::Tensor z = g.constant_like(0.0, {2});
    CHECK_THROWS_AS(mask_loss(z, g.constant({0.5, 1.0}, {2})), ValidationError);
    CHECK_THROWS_AS(mask_loss(z, g.constant({1.0}, {1})), ValidationError);
}

TEST_CASE("dice loss on a saturated perfect prediction is near zero") {
    const int n = 16;
    std::vector<uint8_t> target(n);
    std::vector<double> z(n);
    for (int i = 0; i < n; ++i) {
        target[size_t(i)] = i % 2;
        z[size_t(i)] = target[size_t(i)] ? 100.0 : -100.0;
    }
    ad::Graph g;
    double loss = dice_loss(g.leaf(z, {4, 4}, false), mask_target_tensor(g, target, 4, 4), 1.0).scalar();
    CHECK(loss <= 1e-4);
}

TEST_CASE("dice loss on a saturated disjoint prediction approaches one") {
    const int n = 1024;
    std::vector<uint8_t> target(n);
    std::vector<double> z(n);
    for (int i = 0; i < n; ++i) {
        target[size_t(i)] = i < n / 2 ? 1 : 0;
        z[size_t(i)] = target[size_t(i)] ? -100.0 : 100.0;  // exactly inverted
    }
    ad::Graph g;
    double loss =
        dice_loss(g.leaf(z, {32, 32}, false), mask_target_tensor(g, target, 32, 32), 1e-3).scalar();
    CHECK(loss >= 1.0 - 1e-3);
}

TEST_CASE("dice loss hand evaluation at eps=0") {
    ad::Graph g;
    ad::Tensor z = g.constant({0.0, 0.0}, {1, 2});
    ad::Tensor t = mask_target_tensor(g, {1, 0}, 1, 2);
    CHECK(dice_loss(z, t, 0.0).scalar() == 0.5);  // 1 - (2*0.5)/(1+1)
    CHECK_THROWS_AS(dice_loss(z, t, -1.0), ValidationError);
}

TEST_CASE("presence loss follows mask emptiness only") {
    ad::Graph g;
    CHECK(presence_loss(g.leaf({-100.0}, {1}, false), {0, 0, 0}).scalar() <= 1e-6);
    CHECK(presence_loss(g.leaf({0.0}, {1}, false), {0, 1, 0}).scalar() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // which pixels are set does not matter
    double a = presence_loss(g.leaf({0.7}, {1}, false), {1, 0, 0, 0}).scalar();
    double b = presence_loss(g.leaf({0.7}, {1}, false), {0, 0, 1, 1}).scalar();
    CHECK(a == b);
}

TEST_CASE("seg loss is the exact sum of its components") {
    Rng rng(11);
    std::vector<double> z(36);
    std::vector<uint8_t> target(36);
    for (size_t i = 0; i < z.size(); ++i) {
        z[i] = rng.uniform(-3, 3);
        target[i] = rng.below(2) ? 1 : 0;
    }
    ad::Graph g;
    PromptPrediction pred = pred_from_logits(g, z, 6, 6, 0.4);
    ad::Tensor t = mask_target_tensor(g, target, 6, 6);
    SegLossParts parts = seg_loss(pred, t, target, 1.0);
    double sum = (parts.mask.scalar() + parts.dice.scalar()) + parts.presence.scalar();
    CHECK(std::abs(parts.total.scalar() - sum) <= 1e-12);
}

TEST_CASE("a saturated perfect prediction has near-zero seg loss") {
    std::vector<uint8_t> target = {1, 0, 0, 1};
    std::vector<double> z = {100, -100, -100, 100};
    ad::Graph g;
    PromptPrediction pred = pred_from_logits(g, z, 2, 2, 100.0);
    SegLossParts parts = seg_loss(pred, mask_target_tensor(g, target, 2, 2), target, 1.0);
    CHECK(parts.total.scalar() <= 1e-3);
}

TEST_CASE("all-zero logits on a half-ones target decompose as expected") {
    std::vector<uint8_t> target = {1, 0};
    std::vector<double> z = {0, 0};
    ad::Graph g;
    PromptPrediction pred = pred_from_logits(g, z, 1, 2, 0.0);
    SegLossParts parts = seg_loss(pred, mask_target_tensor(g, target, 1, 2), target, 0.5);
    double dice_expect = 1.0 - (2.0 * 0.5 + 0.5) / (1.0 + 1.0 + 0.5);
    CHECK(parts.mask.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(parts.dice.scalar() == doctest::Approx(dice_expect).epsilon(1e-12));
    CHECK(parts.presence.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// prompt quality and weights
// ---------------------------------------------------------------------------

TEST_CASE("relative quality centers the negated losses") {
    std::vector<double> q, qr;
    prompt_quality({0.2, 0.4, 0.6}, q, qr);
    CHECK(q[0] == doctest::Approx(-0.2).epsilon(1e-12));
    CHECK(qr[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(qr[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(qr[2] == doctest::Approx(-0.2).epsilon(1e-12));
}

TEST_CASE("equal losses give exactly zero relative quality") {
    std::vector<double> q, qr;
    prompt_quality({0.37, 0.37, 0.37, 0.37}, q, qr);
    for (double v : qr) CHECK(v == 0.0);
}

TEST_CASE("prompt quality validates its inputs") {
    std::vector<double> q, qr;
    CHECK_THROWS_AS(prompt_quality({0.5}, q, qr), ValidationError);
    CHECK_THROWS_AS(prompt_quality({0.5, std::nan("")}, q, qr), ValidationError);
}

TEST_CASE("equal losses weight uniformly at any temperature") {
    for (double tau : {0.01, 1.0, 100.0}) {
        auto w = quality_weight_values({0.4, 0.4, 0.4}, tau);
        for (double v : w) CHECK(v == 1.0 / 3.0);
    }
}

TEST_CASE("two-prompt hand evaluation of the weights") {
    auto w = quality_weight_values({0.0, std::log(2.0)}, 1.0);
    CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("small temperature concentrates the weights on the argmin") {
    auto w = quality_weight_values({0.1, 0.9}, 0.01);
    CHECK(w[0] >= 1.0 - 1e-9);
}

TEST_CASE("non-positive temperature is rejected") {
    CHECK_THROWS_AS(quality_weight_values({0.1, 0.9}, 0.0), ValidationError);
    CHECK_THROWS_AS(quality_weight_values({0.1, 0.9}, -1.0), ValidationError);
    ad::Graph g;
    std::vector<ad::Tensor> ls = {g.scalar(0.1), g.scalar(0.9)};
    CHECK_THROWS_AS(quality_weights(ls, 0.0, GroupGradMode::WeightsDifferentiable), ValidationError);
}

TEST_CASE("tape and value weight computations agree") {
    Rng rng(21);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> losses(3);
        for (auto& l : losses) l = rng.uniform(0.0, 3.0);
        double tau = rng.uniform(0.05, 4.0);
        ad::Graph g;
        std::vector<ad::Tensor> ls;
        for (double l : losses) ls.push_back(g.leaf({l}, {1}, true));
        auto w = quality_weights(ls, tau, GroupGradMode::WeightsDifferentiable);
        auto wv = quality_weight_values(losses, tau);
        for (int i = 0; i < 3; ++i) CHECK(w.values()[size_t(i)] == doctest::Approx(wv[size_t(i)]).epsilon(1e-12));
    }
}

// ---------------------------------------------------------------------------
// group loss
// ---------------------------------------------------------------------------

TEST_CASE("group loss vanishes exactly for equal losses") {
    std::vector<double> q, qr;
    prompt_quality({0.7, 0.7, 0.7}, q, qr);
    ad::Graph g;
    std::vector<ad::Tensor> ls = {g.scalar(0.7), g.scalar(0.7), g.scalar(0.7)};
    ad::Tensor w = quality_weights(ls, 1.0, GroupGradMode::WeightsDifferentiable);
    CHECK(group_loss(qr, w).scalar() == 0.0);
}

TEST_CASE("group loss hand evaluation and closed form") {
    std::vector<double> losses = {0.2, 0.4, 0.6};
    std::vector<double> q, qr;
    prompt_quality(losses, q, qr);
    ad::Graph g;
    std::vector<ad::Tensor> ls;
    for (double l : losses) ls.push_back(g.scalar(l));
    ad::Tensor w = quality_weights(ls, 1.0, GroupGradMode::WeightsDifferentiable);
    double got = group_loss(qr, w).scalar();
    CHECK(got == doctest::Approx(-0.08).epsilon(1e-9));
    CHECK(got == doctest::Approx(group_loss_closed_form(qr, 1.0)).epsilon(1e-9));
}

TEST_CASE("group loss rejects zero weights and length mismatches") {
    ad::Graph g;
    ad::Tensor w = g.constant({0.5, 0.5, 0.0}, {3});
    CHECK_THROWS_AS(group_loss({0.1, 0.0, -0.1}, w), ValidationError);
    ad::Tensor w2 = g.constant({0.5, 0.5}, {2});
    CHECK_THROWS_AS(group_loss({0.1, 0.0, -0.1}, w2), ValidationError);
}

TEST_CASE("weight invariants hold on random loss vectors") {
    Rng rng(31);
    for (int rep = 0; rep < 200; ++rep) {
        int k = 2 + int(rng.below(5));
        double tau = rng.uniform(0.05, 5.0);
        std::vector<double> losses(size_t(k), 0.0);
        for (auto& l : losses) l = rng.uniform(0.0, 4.0);
        auto w = quality_weight_values(losses, tau);

        double sum = 0.0;
        for (double v : w) sum += v;
        CHECK(std::abs(sum - 1.0) <= 1e-9);

        // anti-monotone in the loss
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
                if (losses[size_t(i)] < losses[size_t(j)]) CHECK(w[size_t(i)] > w[size_t(j)]);

        // invariant to a constant shift of all losses
        double c = rng.uniform(-5.0, 5.0);
        std::vector<double> shifted = losses;
        for (auto& l : shifted) l += c;
        auto w2 = quality_weight_values(shifted, tau);
        for (int i = 0; i < k; ++i) CHECK(std::abs(w[size_t(i)] - w2[size_t(i)]) <= 1e-9);

        // value identity against the closed form; always non-positive. The
        // identity holds while no weight falls below the 1e-12 log guard,
        // so keep the temperature above gap/ln(1e12).
        double max_gap = *std::max_element(losses.begin(), losses.end()) -
                         *std::min_element(losses.begin(), losses.end());
        double tau_id = std::max(tau, max_gap / 25.0 + 0.01);
        std::vector<double> q, qr;
        prompt_quality(losses, q, qr);
        ad::Graph g;
        std::vector<ad::Tensor> ls;
        for (double l : losses) ls.push_back(g.scalar(l));
        double lg =
            group_loss(qr, quality_weights(ls, tau_id, GroupGradMode::WeightsDifferentiable)).scalar();
        CHECK(lg == doctest::Approx(group_loss_closed_form(qr, tau_id)).epsilon(1e-9));
        CHECK(lg <= 1e-15);

        // temperature scaling acts as 1/c on the closed form, argmax unchanged
        double scale = rng.uniform(0.5, 3.0);
        double scaled = group_loss_closed_form(qr, tau * scale);
        double via_div = group_loss_closed_form(qr, tau) / scale;
        CHECK(std::abs(scaled - via_div) <= 1e-12 * std::max(1.0, std::abs(scaled)));
        auto w3 = quality_weight_values(losses, tau * scale);
        CHECK(std::max_element(w3.begin(), w3.end()) - w3.begin() ==
              std::max_element(w.begin(), w.end()) - w.begin());
    }
}

// ---------------------------------------------------------------------------
// consistency loss
// ---------------------------------------------------------------------------

TEST_CASE("consistency loss vanishes for identical logits") {
    ad::Graph g;
    ad::Tensor z = g.leaf({0.3, -0.7}, {1, 2}, true);
    std::vector<ad::Tensor> zs = {z, z, z};
    CHECK(consistency_loss(zs, ConsNorm::MeanPerPixel, ConsVariant::StopGradReference).scalar() == 0.0);
}

TEST_CASE("single-pixel hand evaluation where both norms agree") {
    ad::Graph g;
    std::vector<ad::Tensor> zs = {g.leaf({0.0}, {1, 1}, true), g.leaf({2.0}, {1, 1}, true)};
    CHECK(consistency_loss(zs, ConsNorm::MeanPerPixel, ConsVariant::StopGradReference).scalar() == 4.0);
    CHECK(consistency_loss(zs, ConsNorm::Sum, ConsVariant::StopGradReference).scalar() == 4.0);
}

TEST_CASE("consistency gradients match the hand derivation") {
    Rng rng(41);
    const int h = 2, w = 3, k = 3;
    ad::Graph g;
    std::vector<ad::Tensor> zs;
    std::vector<std::vector<double>> vals;
    for (int i = 0; i < k; ++i) {
        std::vector<double> v(size_t(h) * w);
        for (auto& x : v) x = rng.uniform(-2, 2);
        vals.push_back(v);
        zs.push_back(g.leaf(v, {h, w}, true));
    }
    ad::Tensor loss = consistency_loss(zs, ConsNorm::MeanPerPixel, ConsVariant::StopGradReference);
    auto grads = g.backward(loss);

    // reference receives exactly zero
    for (double v : grads.at(zs[0].id)) CHECK(v == 0.0);
    // others: 2 (z_i - z_0) / ((k-1) * h * w)
    for (int i = 1; i < k; ++i)
        for (size_t p = 0; p < vals[0].size(); ++p) {
            double expect = 2.0 * (vals[size_t(i)][p] - vals[0][p]) / double((k - 1) * h * w);
            CHECK(grads.at(zs[size_t(i)].id)[p] == doctest::Approx(expect).epsilon(1e-9));
        }
}

TEST_CASE("pairwise variant is permutation symmetric, the anchored one is not") {
    Rng rng(43);
    std::vector<std::vector<double>> vals(3, std::vector<double>(4));
    for (auto& v : vals)
        for (auto& x : v) x = rng.uniform(-2, 2);

    auto value = [&](ConsVariant variant, const std::vector<int>& perm) {
        ad::Graph g;
        std::vector<ad::Tensor> zs;
        for (int i : perm) zs.push_back(g.leaf(vals[size_t(i)], {2, 2}, true));
        return consistency_loss(zs, ConsNorm::MeanPerPixel, variant).scalar();
    };
    double pw_fwd = value(ConsVariant::FullPairwise, {0, 1, 2});
    double pw_rev = value(ConsVariant::FullPairwise, {2, 0, 1});
    CHECK(pw_fwd == doctest::Approx(pw_rev).epsilon(1e-12));

    double sg_fwd = value(ConsVariant::StopGradReference, {0, 1, 2});
    double sg_rev = value(ConsVariant::StopGradReference, {2, 0, 1});
    CHECK(std::abs(sg_fwd - sg_rev) > 1e-6);
}

TEST_CASE("consistency loss validates its inputs") {
    ad::Graph g;
    std::vector<ad::Tensor> one = {g.leaf({0.0}, {1, 1}, true)};
    CHECK_THROWS_AS(consistency_loss(one, ConsNorm::Sum, ConsVariant::StopGradReference),
                    ValidationError);
    std::vector<ad::Tensor> bad = {g.leaf({0.0}, {1, 1}, true), g.leaf({0.0, 1.0}, {1, 2}, true)};
    CHECK_THROWS_AS(consistency_loss(bad, ConsNorm::Sum, ConsVariant::StopGradReference),
                    ValidationError);
}

// ---------------------------------------------------------------------------
// total loss
// ---------------------------------------------------------------------------

namespace {

struct GroupSetup {
    ad::Graph graph;
    std::vector<PromptPrediction> preds;
    std::vector<uint8_t> target;
    int h = 4, w = 4;
};

void fill_random_group(GroupSetup& s, uint64_t seed, int k) {
    Rng rng(seed);
    s.target.resize(size_t(s.h) * s.w);
    for (auto& t : s.target) t = rng.below(2) ? 1 : 0;
    for (int i = 0; i < k; ++i) {
        std::vector<double> z(size_t(s.h) * s.w);
        for (auto& v : z) v = rng.uniform(-2, 2);
        s.preds.push_back(pred_from_logits(s.graph, z, s.h, s.w, rng.uniform(-1, 1)));
    }
}

}  // namespace

TEST_CASE("zero-weight regularizers reduce the total to the mean seg loss") {
    GroupSetup s;
    fill_random_group(s, 51, 3);
    LossConfig cfg;
    cfg.group_weight = 0.0;
    cfg.consistency_weight = 0.0;
    TotalLossResult res = total_loss(s.graph, s.preds, s.target, s.h, s.w, cfg);
    double mean_seg =
        (res.breakdown.seg_loss[0] + res.breakdown.seg_loss[1] + res.breakdown.seg_loss[2]) / 3.0;
    CHECK(res.breakdown.total == doctest::Approx(mean_seg).epsilon(1e-15));
    CHECK(res.breakdown.group_loss == 0.0);
    CHECK(res.breakdown.consistency_loss == 0.0);
}

TEST_CASE("identical per-prompt predictions remove both regularizers") {
    GroupSetup s;
    Rng rng(53);
    s.target.resize(16);
    for (auto& t : s.target) t = rng.below(2) ? 1 : 0;
    std::vector<double> z(16);
    for (auto& v : z) v = rng.uniform(-2, 2);
    for (int i = 0; i < 3; ++i) s.preds.push_back(pred_from_logits(s.graph, z, 4, 4, 0.2));

    LossConfig cfg;  // defaults: both regularizers on
    TotalLossResult res = total_loss(s.graph, s.preds, s.target, s.h, s.w, cfg);
    CHECK(res.breakdown.group_loss == 0.0);
    CHECK(res.breakdown.consistency_loss == 0.0);
    CHECK(res.breakdown.total == doctest::Approx(res.breakdown.seg_loss[0]).epsilon(1e-12));
}

TEST_CASE("total equals the hand-assembled objective on a random group") {
    GroupSetup s;
    fill_random_group(s, 57, 3);
    LossConfig cfg;
    cfg.temperature = 0.7;
    cfg.group_weight = 0.9;
    cfg.consistency_weight = 0.15;
    TotalLossResult res = total_loss(s.graph, s.preds, s.target, s.h, s.w, cfg);

    double mean_seg =
        (res.breakdown.seg_loss[0] + res.breakdown.seg_loss[1] + res.breakdown.seg_loss[2]) / 3.0;
    double expect = mean_seg + cfg.group_weight * res.breakdown.group_loss +
                    cfg.consistency_weight * res.breakdown.consistency_loss;
    CHECK(std::abs(res.breakdown.total - expect) <= 1e-12);

    // breakdown invariants
    for (size_t i = 0; i < 3; ++i) {
        double sum = (res.breakdown.mask_loss[i] + res.breakdown.dice_loss[i]) +
                     res.breakdown.presence_loss[i];
        CHECK(res.breakdown.seg_loss[i] == sum);
    }
    double wsum = 0.0, qsum = 0.0;
    for (double v : res.breakdown.weights) wsum += v;
    for (double v : res.breakdown.relative_quality) qsum += v;
    CHECK(std::abs(wsum - 1.0) <= 1e-9);
    CHECK(std::abs(qsum) <= 1e-9);
}

TEST_CASE("group terms require at least two prompts") {
    GroupSetup s;
    fill_random_group(s, 59, 1);
    LossConfig cfg;
    CHECK_THROWS_AS(total_loss(s.graph, s.preds, s.target, s.h, s.w, cfg), ValidationError);
    cfg.group_weight = 0.0;
    cfg.consistency_weight = 0.0;
    TotalLossResult res = total_loss(s.graph, s.preds, s.target, s.h, s.w, cfg);
    CHECK(res.breakdown.total == doctest::Approx(res.breakdown.seg_loss[0]).epsilon(1e-15));
}

// ---------------------------------------------------------------------------
// detachment semantics on a real model
// ---------------------------------------------------------------------------

namespace {

ModelConfig probe_model_config() {
    ModelConfig cfg;
    cfg.d_img = 3;
    cfg.n_candidates = 2;
    cfg.k_select = 1;
    return cfg;
}

// gradient of weight * group_loss alone through a real model forward
std::vector<double> group_term_param_grads(uint64_t seed, GroupGradMode mode) {
    ModelConfig mcfg = probe_model_config();
    ModelState state(mcfg, seed);
    TextEncoder enc;
    Rng rng(mix_seed(seed, "data"));
    const int h = 6, w = 6;
    std::vector<double> image(size_t(h) * w);
    for (auto& v : image) v = rng.uniform01();
    std::vector<uint8_t> target(size_t(h) * w);
    for (auto& t : target) t = rng.below(2) ? 1 : 0;

    PromptGroup group;
    group.task = Task::AllNuclei;
    group.image_id = "probe";
    group.mask_id = "probe:t1";
    group.prompts = {{"segment nuclei", Tier::Low}, {"all the nuclei everywhere", Tier::Medium}};

    ad::Graph g;
    BoundModel m = bind_model(g, state, true);
    auto preds = forward_group(g, m, image, h, w, group, enc);
    ad::Tensor t = mask_target_tensor(g, target, h, w);

    std::vector<ad::Tensor> seg_tensors;
    std::vector<double> seg_values;
    for (const auto& p : preds) {
        SegLossParts parts = seg_loss(p, t, target, 1.0);
        seg_tensors.push_back(parts.total);
        seg_values.push_back(parts.total.scalar());
    }
    std::vector<double> q, qr;
    prompt_quality(seg_values, q, qr);
    ad::Tensor w_t = quality_weights(seg_tensors, 1.0, mode);
    ad::Tensor term = ad::mul(group_loss(qr, w_t), g.scalar(1.0));
    auto grads = g.backward(term);

    std::vector<double> flat;
    for (const auto& info : state.params())
        for (double v : grads.at(m.at(info.name).id)) flat.push_back(v);
    return flat;
}

}  // namespace

TEST_CASE("fully-detached group term contributes exactly zero gradient") {
    for (uint64_t seed : {1u, 2u, 3u}) {
        auto grads = group_term_param_grads(seed, GroupGradMode::FullyDetached);
        for (double v : grads) CHECK(v == 0.0);
    }
}

TEST_CASE("weight-differentiable group term carries gradient") {
    for (uint64_t seed : {1u, 2u, 3u}) {
        auto grads = group_term_param_grads(seed, GroupGradMode::WeightsDifferentiable);
        double norm = 0.0;
        for (double v : grads) norm += v * v;
        CHECK(norm > 0.0);
    }
}

// ---------------------------------------------------------------------------
// full-objective gradient check on a small real model
// ---------------------------------------------------------------------------

TEST_CASE("full objective gradient matches stop-grad-aware central differences") {
    ModelConfig mcfg = probe_model_config();
    ModelState state(mcfg, 77);
    TextEncoder enc;
    const int h = 5, w = 5;
    Rng rng(400);
    std::vector<double> image(size_t(h) * w);
    for (auto& v : image) v = rng.uniform01();
    std::vector<uint8_t> target(size_t(h) * w);
    for (auto& t : target) t = rng.below(2) ? 1 : 0;

    PromptGroup group;
    group.task = Task::AllNuclei;
    group.image_id = "probe";
    group.mask_id = "probe:t1";
    group.prompts = {{"nuclei", Tier::Low}, {"every nucleus in the image", Tier::High}};

    // probe inputs are the parameters themselves, in registry order
    std::vector<ad::ProbeInput> inputs;
    for (const auto& info : state.params()) inputs.push_back({info.shape, state.values(info.name)});

    LossConfig lcfg;  // full objective with both regularizers
    auto fn = [&](ad::Graph& g, const std::vector<ad::Tensor>& params) {
        BoundModel m;
        m.cfg = mcfg;
        size_t i = 0;
        for (const auto& info : state.params()) m.param[info.name] = params[i++];
        auto preds = forward_group(g, m, image, h, w, group, enc);
        return total_loss(g, preds, target, h, w, lcfg).total;
    };
    double err = ad::grad_check(fn, inputs, 1e-6, true);
    CHECK(err <= 1e-5);
}
