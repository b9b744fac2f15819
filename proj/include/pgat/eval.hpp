#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pgat/dataset.hpp"
#include "pgat/model.hpp"
#include "pgat/run_config.hpp"

namespace pgat {

// Dice convention, stated in every report header: both masks empty scores
// 1.0 (correctly rejecting an absent class counts as success); an empty
// prediction against a non-empty target scores 0.
inline constexpr const char* kDiceConvention =
    "dice convention: both-empty=1.0, empty-pred-vs-nonempty-gt=0.0";

// 2|P&T| / (|P|+|T|); rejects non-binary buffers
double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

struct EvalItem {
    std::string image_id;
    Task task = Task::AllNuclei;
    Tier tier = Tier::Low;
    int class_id = -1;
    std::string prompt;
    double dice = 0.0;
};

struct TierCell {
    int count = 0;
    double mean = 0.0;
    double stddev = 0.0;
};

struct RobustnessReport {
    std::vector<EvalItem> items;               // per-image dumps, sorted
    std::map<std::string, TierCell> cells;     // "t1/low" .. "t2/high"
    std::map<std::string, double> cross_tier_std;  // per task, std of tier means
    std::map<std::string, double> task_mean;       // per task, mean of tier means

    const TierCell& cell(Task task, Tier tier) const;
    std::string to_csv() const;
    std::string to_json_text(const std::string& config_hash = "") const;
};

// One inference per evaluation item. The predictor sees the scene, the
// group and the single prompt text chosen for the item.
using MaskPredictor =
    std::function<std::vector<uint8_t>(const StoredScene&, const PromptGroup&, const std::string&)>;
using PredictorFactory = std::function<MaskPredictor()>;

// Wraps a trained model; asserts that exactly one prompt is encoded per item.
PredictorFactory model_predictor(const ModelState& state);

// Requires single-tier groups covering every tier for each task present.
// Items are reduced in (task, tier, image, class) order, so the report is
// invariant to dataset ordering; workers > 1 parallelizes over items.
RobustnessReport evaluate_by_tier(const PredictorFactory& factory, const Dataset& eval_data,
                                  int workers = 1);

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

struct AblationCell {
    std::string setting;
    std::vector<uint64_t> seeds;
    std::vector<double> t1_scores;  // low-tier T1 mean dice per seed
    std::vector<double> t2_scores;  // low-tier T2 mean dice per seed
    double t1_mean = 0.0, t1_std = 0.0;
    double t2_mean = 0.0, t2_std = 0.0;
};

struct AblationTable {
    std::string axis;
    std::vector<AblationCell> cells;
    std::string to_csv() const;
    std::string to_json_text(const std::string& config_hash = "") const;
};

// axis "loss-design": full / no-group-no-cons / no-cons / full-pairwise
// axis "beta":        consistency weight 0.05 and 0.2
// axis "K":           group sizes 2..6 (training groups are regenerated)
// Each cell trains n_seeds models (seed, seed+1, ...) and reports low-tier
// dice mean and std per task.
AblationTable run_ablation(const RunConfig& base, const DatasetGenSpec& train_spec, int n_train_scenes,
                           uint64_t data_seed, const Dataset& eval_data, const std::string& axis,
                           int n_seeds = 5, int workers = 1);

// ---------------------------------------------------------------------------
// zero-shot domain shift
// ---------------------------------------------------------------------------

struct ZeroShotItem {
    int model_index = 0;
    std::string image_id;
    double dice = 0.0;
};

struct ZeroShotRow {
    std::string preset;
    std::string method;
    double mean_dice = 0.0;
    std::vector<ZeroShotItem> items;
};

struct ZeroShotTable {
    std::vector<ZeroShotRow> rows;
    std::string to_csv() const;
    std::string to_json_text() const;
};

struct ZeroShotMethod {
    std::string name;
    std::vector<const ModelState*> models;  // one per seed
};

// Generates a shifted evaluation set per preset (never seen in training) and
// scores every method's models on low-tier T1 prompts.
ZeroShotTable zero_shot_eval(const std::vector<ZeroShotMethod>& methods,
                             const DatasetGenSpec& base_eval_spec, int n_scenes, uint64_t seed,
                             const std::vector<std::string>& presets, int workers = 1);

}  // namespace pgat
