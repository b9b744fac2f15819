#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "pgat/errors.hpp"
#include "pgat/eval.hpp"
#include "pgat/rng.hpp"
#include "pgat/trainer.hpp"

using namespace pgat;

namespace {

DatasetGenSpec micro_spec(GroupMode mode) {
    DatasetGenSpec spec;
    spec.base.height = 16;
    spec.base.width = 16;
    spec.base.radius_min = 2.0;
    spec.base.radius_max = 3.0;  // leaves room for the size-shift preset
    spec.n_blobs_min = 2;
    spec.n_blobs_max = 4;
    spec.group_mode = mode;
    return spec;
}

RunConfig micro_run_config() {
    RunConfig cfg;
    cfg.model.d_img = 3;
    cfg.model.n_candidates = 2;
    cfg.model.k_select = 1;
    cfg.train.learning_rate = 1e-3;
    cfg.train.epochs = 1;
    cfg.train.seed = 3;
    return cfg;
}

// stub that answers with the ground truth regardless of the prompt
PredictorFactory oracle_factory(const Dataset& data) {
    const Dataset* d = &data;
    return [d]() -> MaskPredictor {
        return [d](const StoredScene&, const PromptGroup& g, const std::string&) {
            return d->mask(g.mask_id);
        };
    };
}

}  // namespace

TEST_CASE("dice score basics") {
    CHECK(dice_score({1, 1, 0}, {1, 1, 0}) == 1.0);
    CHECK(dice_score({1, 0, 0}, {0, 0, 1}) == 0.0);
    CHECK(dice_score({0, 0}, {0, 0}) == 1.0);  // both empty
    CHECK(dice_score({0, 1}, {0, 0}) == 0.0);  // empty ground truth, non-empty prediction
    // |P|=|T|=4, |P&T|=2
    CHECK(dice_score({1, 1, 1, 1, 0, 0}, {1, 1, 0, 0, 1, 1}) == 0.5);
    CHECK_THROWS_AS(dice_score({2, 0}, {1, 0}), ValidationError);
    CHECK_THROWS_AS(dice_score({1, 0}, {1}), ValidationError);
}

TEST_CASE("a ground-truth oracle scores a perfect report") {
    Dataset data = generate_dataset(micro_spec(GroupMode::Eval), 4, 19, TemplateBank::builtin());
    RobustnessReport rep = evaluate_by_tier(oracle_factory(data), data);
    for (const auto& [key, cell] : rep.cells) {
        CHECK(cell.mean == 1.0);
        CHECK(cell.stddev == 0.0);
    }
    for (const auto& [task, v] : rep.cross_tier_std) CHECK(v == 0.0);
    for (const auto& [task, v] : rep.task_mean) CHECK(v == 1.0);
}

TEST_CASE("reports ignore dataset ordering") {
    Dataset data = generate_dataset(micro_spec(GroupMode::Eval), 5, 23, TemplateBank::builtin());
    RobustnessReport a = evaluate_by_tier(oracle_factory(data), data);

    Dataset shuffled = data;
    std::reverse(shuffled.groups.begin(), shuffled.groups.end());
    std::reverse(shuffled.scenes.begin(), shuffled.scenes.end());
    RobustnessReport b = evaluate_by_tier(oracle_factory(shuffled), shuffled);

    REQUIRE(a.items.size() == b.items.size());
    for (size_t i = 0; i < a.items.size(); ++i) {
        CHECK(a.items[i].image_id == b.items[i].image_id);
        CHECK(a.items[i].dice == b.items[i].dice);
    }
    for (const auto& [key, cell] : a.cells) {
        CHECK(b.cells.at(key).mean == cell.mean);
        CHECK(b.cells.at(key).stddev == cell.stddev);
    }
}

TEST_CASE("report cells equal a brute-force recomputation from the item dump") {
    RunConfig cfg = micro_run_config();
    Dataset train_data = generate_dataset(micro_spec(GroupMode::Train), 3, 29, TemplateBank::builtin());
    Dataset eval_data = generate_dataset(micro_spec(GroupMode::Eval), 4, 31, TemplateBank::builtin());
    TrainResult run = train(cfg, train_data);
    RobustnessReport rep = evaluate_by_tier(model_predictor(run.state), eval_data);

    for (const auto& [key, cell] : rep.cells) {
        std::vector<double> xs;
        for (const auto& it : rep.items)
            if (std::string(task_name(it.task)) + "/" + tier_name(it.tier) == key) xs.push_back(it.dice);
        REQUIRE(int(xs.size()) == cell.count);
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= double(xs.size());
        CHECK(cell.mean == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("parallel evaluation matches the serial reduction") {
    Dataset data = generate_dataset(micro_spec(GroupMode::Eval), 6, 37, TemplateBank::builtin());
    RunConfig cfg = micro_run_config();
    Dataset train_data = generate_dataset(micro_spec(GroupMode::Train), 3, 38, TemplateBank::builtin());
    TrainResult run = train(cfg, train_data);
    RobustnessReport serial = evaluate_by_tier(model_predictor(run.state), data, 1);
    RobustnessReport parallel = evaluate_by_tier(model_predictor(run.state), data, 3);
    REQUIRE(serial.items.size() == parallel.items.size());
    for (size_t i = 0; i < serial.items.size(); ++i)
        CHECK(serial.items[i].dice == parallel.items[i].dice);
}

TEST_CASE("evaluation rejects incomplete or mixed-tier datasets") {
    Dataset data = generate_dataset(micro_spec(GroupMode::Eval), 3, 41, TemplateBank::builtin());

    Dataset missing = data;
    missing.groups.clear();
    for (const auto& g : data.groups)
        if (!(g.task == Task::AllNuclei && g.prompts[0].tier == Tier::High)) missing.groups.push_back(g);
    CHECK_THROWS_AS(evaluate_by_tier(oracle_factory(missing), missing), ValidationError);

    Dataset mixed = data;
    mixed.groups[0].prompts[1].tier = Tier::High;
    CHECK_THROWS_AS(evaluate_by_tier(oracle_factory(mixed), mixed), ValidationError);
}

TEST_CASE("csv and json reports carry the dice convention header") {
    Dataset data = generate_dataset(micro_spec(GroupMode::Eval), 3, 43, TemplateBank::builtin());
    RobustnessReport rep = evaluate_by_tier(oracle_factory(data), data);
    CHECK(rep.to_csv().find(kDiceConvention) != std::string::npos);
    CHECK(rep.to_json_text("abc").find("dice_convention") != std::string::npos);
}

// ---------------------------------------------------------------------------
// ablation runner
// ---------------------------------------------------------------------------

TEST_CASE("loss-design ablation produces the four expected rows") {
    RunConfig base = micro_run_config();
    Dataset eval_data = generate_dataset(micro_spec(GroupMode::Eval), 2, 47, TemplateBank::builtin());
    AblationTable table =
        run_ablation(base, micro_spec(GroupMode::Train), 2, 53, eval_data, "loss-design", 5);
    REQUIRE(table.cells.size() == 4);
    CHECK(table.cells[0].setting == "full");
    CHECK(table.cells[1].setting == "no-group-no-cons");
    CHECK(table.cells[2].setting == "no-cons");
    CHECK(table.cells[3].setting == "full-pairwise");
    for (const auto& c : table.cells) {
        CHECK(c.seeds.size() == 5);
        CHECK(c.t1_scores.size() == 5);
        for (double v : c.t1_scores) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    CHECK(table.to_csv().find("no-group-no-cons") != std::string::npos);
}

TEST_CASE("K ablation covers group sizes 2 through 6") {
    RunConfig base = micro_run_config();
    Dataset eval_data = generate_dataset(micro_spec(GroupMode::Eval), 2, 59, TemplateBank::builtin());
    AblationTable table = run_ablation(base, micro_spec(GroupMode::Train), 2, 61, eval_data, "K", 5);
    REQUIRE(table.cells.size() == 5);
    for (int k = 2; k <= 6; ++k) CHECK(table.cells[size_t(k - 2)].setting == "K-" + std::to_string(k));
}

TEST_CASE("the no-regularizer cell reproduces a plain baseline run identically") {
    RunConfig base = micro_run_config();
    Dataset eval_data = generate_dataset(micro_spec(GroupMode::Eval), 2, 67, TemplateBank::builtin());
    AblationTable table =
        run_ablation(base, micro_spec(GroupMode::Train), 2, 71, eval_data, "loss-design", 5);

    // rerun the degenerate configuration by hand with the same seeds
    Dataset train_data = generate_dataset(micro_spec(GroupMode::Train), 2, 71, TemplateBank::builtin());
    RunConfig plain = base;
    plain.loss.group_weight = 0.0;
    plain.loss.consistency_weight = 0.0;
    for (int s = 0; s < 5; ++s) {
        plain.train.seed = base.train.seed + uint64_t(s);
        TrainResult run = train(plain, train_data);
        RobustnessReport rep = evaluate_by_tier(model_predictor(run.state), eval_data);
        CHECK(rep.cell(Task::AllNuclei, Tier::Low).mean == table.cells[1].t1_scores[size_t(s)]);
        CHECK(rep.cell(Task::CategorySpecific, Tier::Low).mean == table.cells[1].t2_scores[size_t(s)]);
    }
}

TEST_CASE("ablations reject bad axes and too few seeds") {
    RunConfig base = micro_run_config();
    Dataset eval_data = generate_dataset(micro_spec(GroupMode::Eval), 2, 73, TemplateBank::builtin());
    CHECK_THROWS_AS(run_ablation(base, micro_spec(GroupMode::Train), 2, 1, eval_data, "widths", 5),
                    ValidationError);
    CHECK_THROWS_AS(run_ablation(base, micro_spec(GroupMode::Train), 2, 1, eval_data, "beta", 3),
                    ValidationError);
}

// ---------------------------------------------------------------------------
// zero-shot
// ---------------------------------------------------------------------------

TEST_CASE("zero-shot evaluation emits one row per preset and method") {
    RunConfig cfg = micro_run_config();
    Dataset train_data = generate_dataset(micro_spec(GroupMode::Train), 3, 79, TemplateBank::builtin());
    TrainResult full = train(cfg, train_data);
    cfg.loss.group_weight = 0.0;
    cfg.loss.consistency_weight = 0.0;
    TrainResult baseline = train(cfg, train_data);

    std::vector<ZeroShotMethod> methods = {{"full", {&full.state}}, {"baseline", {&baseline.state}}};
    ZeroShotTable table =
        zero_shot_eval(methods, micro_spec(GroupMode::Eval), 3, 83, {"density", "size", "noise"});
    REQUIRE(table.rows.size() == 6);  // 3 presets x 2 methods

    for (const auto& row : table.rows) {
        REQUIRE(!row.items.empty());
        double mean = 0.0;
        for (const auto& it : row.items) mean += it.dice;
        mean /= double(row.items.size());
        CHECK(row.mean_dice == doctest::Approx(mean).epsilon(1e-12));
    }
    CHECK(table.to_csv().find("density") != std::string::npos);
    CHECK_THROWS_AS(zero_shot_eval(methods, micro_spec(GroupMode::Eval), 3, 83, {"warp"}),
                    ValidationError);
}

TEST_CASE("the identity preset stays within the in-distribution noise band") {
    RunConfig cfg = micro_run_config();
    cfg.train.epochs = 2;
    Dataset train_data = generate_dataset(micro_spec(GroupMode::Train), 4, 89, TemplateBank::builtin());
    TrainResult run = train(cfg, train_data);

    // in-distribution low-tier T1 score on a fresh evaluation set
    Dataset eval_data = generate_dataset(micro_spec(GroupMode::Eval), 6, 97, TemplateBank::builtin());
    RobustnessReport rep = evaluate_by_tier(model_predictor(run.state), eval_data);
    double in_dist = rep.cell(Task::AllNuclei, Tier::Low).mean;

    std::vector<ZeroShotMethod> methods = {{"full", {&run.state}}};
    ZeroShotTable table = zero_shot_eval(methods, micro_spec(GroupMode::Eval), 6, 97, {"identity"});
    REQUIRE(table.rows.size() == 1);
    CHECK(std::abs(table.rows[0].mean_dice - in_dist) <= 0.3);  // same generator, fresh draw
}
