#include "pgat/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"
#include "pgat/trainer.hpp"

using nlohmann::json;

namespace pgat {

double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
    if (pred.size() != gt.size()) throw ValidationError("dice: mask extents differ");
    long inter = 0, np = 0, nt = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] > 1 || gt[i] > 1) throw ValidationError("dice: masks must be binary");
        np += pred[i];
        nt += gt[i];
        inter += pred[i] & gt[i];
    }
    if (np + nt == 0) return 1.0;  // both empty: correct rejection
    return 2.0 * double(inter) / double(np + nt);
}

namespace {

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / double(xs.size());
}

double std_of(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / double(xs.size()));
}

std::string cell_key(Task task, Tier tier) {
    return std::string(task_name(task)) + "/" + tier_name(tier);
}

}  // namespace

const TierCell& RobustnessReport::cell(Task task, Tier tier) const {
    auto it = cells.find(cell_key(task, tier));
    if (it == cells.end()) throw ValidationError("report has no cell " + cell_key(task, tier));
    return it->second;
}

std::string RobustnessReport::to_csv() const {
    std::ostringstream os;
    os << "# " << kDiceConvention << "\n";
    os << "task,tier,count,mean_dice,std_dice\n";
    for (const auto& [key, cell] : cells)
        os << key.substr(0, key.find('/')) << "," << key.substr(key.find('/') + 1) << "," << cell.count
           << "," << cell.mean << "," << cell.stddev << "\n";
    for (const auto& [task, v] : cross_tier_std)
        os << task << ",cross-tier-std," << "," << v << ",\n";
    for (const auto& [task, v] : task_mean) os << task << ",all," << "," << v << ",\n";
    return os.str();
}

std::string RobustnessReport::to_json_text(const std::string& config_hash) const {
    json j;
    j["dice_convention"] = kDiceConvention;
    if (!config_hash.empty()) j["config_sha256"] = config_hash;
    for (const auto& [key, cell] : cells)
        j["cells"][key] = {{"count", cell.count}, {"mean", cell.mean}, {"std", cell.stddev}};
    j["cross_tier_std"] = cross_tier_std;
    j["task_mean"] = task_mean;
    json jitems = json::array();
    for (const auto& it : items) {
        json ji;
        ji["image_id"] = it.image_id;
        ji["task"] = task_name(it.task);
        ji["tier"] = tier_name(it.tier);
        if (it.class_id >= 0) ji["class_id"] = it.class_id;
        ji["prompt"] = it.prompt;
        ji["dice"] = it.dice;
        jitems.push_back(std::move(ji));
    }
    j["items"] = std::move(jitems);
    return j.dump(2);
}

PredictorFactory model_predictor(const ModelState& state) {
    const ModelState* sp = &state;
    return [sp]() -> MaskPredictor {
        auto enc = std::make_shared<TextEncoder>();
        return [sp, enc](const StoredScene& scene, const PromptGroup&, const std::string& text) {
            enc->reset_call_count();
            std::vector<double> image(scene.image.size());
            for (size_t i = 0; i < image.size(); ++i) image[i] = double(scene.image[i]) / 255.0;
            ad::Graph g;
            BoundModel m = bind_model(g, *sp, false);
            PromptPrediction pred =
                forward_prompt(g, m, image, scene.height, scene.width, text, *enc);
            if (enc->call_count() != 1)
                throw std::runtime_error("inference encoded " + std::to_string(enc->call_count()) +
                                         " prompts for one item, expected exactly 1");
            return predict_mask(pred.mask_logits.values(), sp->config().threshold);
        };
    };
}

RobustnessReport evaluate_by_tier(const PredictorFactory& factory, const Dataset& eval_data,
                                  int workers) {
    if (workers < 1) throw ValidationError("workers must be at least 1");

    // eval groups must be single-tier and cover every tier per task present
    std::map<std::string, bool> tier_seen;
    std::map<std::string, bool> task_seen;
    for (const auto& g : eval_data.groups) {
        if (g.prompts.empty()) throw ValidationError("evaluation group without prompts");
        for (const auto& p : g.prompts)
            if (p.tier != g.prompts[0].tier)
                throw ValidationError("evaluation requires single-tier groups (image '" +
                                      g.image_id + "' mixes tiers)");
        task_seen[task_name(g.task)] = true;
        tier_seen[cell_key(g.task, g.prompts[0].tier)] = true;
    }
    for (const auto& [task, _] : task_seen)
        for (Tier tier : {Tier::Low, Tier::Medium, Tier::High})
            if (!tier_seen.count(task + "/" + std::string(tier_name(tier))))
                throw ValidationError("tier '" + std::string(tier_name(tier)) +
                                      "' missing from evaluation dataset for task " + task);

    std::vector<EvalItem> items(eval_data.groups.size());
    std::atomic<size_t> next{0};
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers), nullptr);
    auto work = [&](int wi) {
        try {
            MaskPredictor predict = factory();
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= eval_data.groups.size()) break;
                const PromptGroup& g = eval_data.groups[i];
                const StoredScene& scene = eval_data.scene(g.image_id);
                const std::string& text = g.prompts[0].text;  // single prompt per item
                auto pred = predict(scene, g, text);
                EvalItem item;
                item.image_id = g.image_id;
                item.task = g.task;
                item.tier = g.prompts[0].tier;
                item.class_id = g.class_id;
                item.prompt = text;
                item.dice = dice_score(pred, eval_data.mask(g.mask_id));
                items[i] = std::move(item);
            }
        } catch (...) {
            errors[size_t(wi)] = std::current_exception();
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        for (int w = 0; w < workers; ++w) threads.emplace_back(work, w);
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    // reduce in a canonical order so the report ignores dataset ordering
    std::sort(items.begin(), items.end(), [](const EvalItem& a, const EvalItem& b) {
        return std::tie(a.task, a.tier, a.image_id, a.class_id) <
               std::tie(b.task, b.tier, b.image_id, b.class_id);
    });

    RobustnessReport report;
    report.items = std::move(items);
    std::map<std::string, std::vector<double>> by_cell;
    for (const auto& it : report.items) by_cell[cell_key(it.task, it.tier)].push_back(it.dice);
    for (const auto& [key, xs] : by_cell)
        report.cells[key] = {int(xs.size()), mean_of(xs), std_of(xs)};
    for (const auto& [task, _] : task_seen) {
        std::vector<double> tier_means;
        for (Tier tier : {Tier::Low, Tier::Medium, Tier::High})
            tier_means.push_back(report.cells.at(task + "/" + std::string(tier_name(tier))).mean);
        report.cross_tier_std[task] = std_of(tier_means);
        report.task_mean[task] = mean_of(tier_means);
    }
    return report;
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

AblationTable run_ablation(const RunConfig& base, const DatasetGenSpec& train_spec, int n_train_scenes,
                           uint64_t data_seed, const Dataset& eval_data, const std::string& axis,
                           int n_seeds, int workers) {
    if (n_seeds < 5) throw ValidationError("ablation cells need at least 5 seeds");
    base.validate();

    struct CellSpec {
        std::string setting;
        RunConfig cfg;
        int k_override = 0;  // regenerate training groups with this K when > 0
    };
    std::vector<CellSpec> specs;
    if (axis == "loss-design") {
        RunConfig cfg = base;
        specs.push_back({"full", cfg, 0});
        cfg = base;
        cfg.loss.group_weight = 0.0;
        cfg.loss.consistency_weight = 0.0;
        specs.push_back({"no-group-no-cons", cfg, 0});
        cfg = base;
        cfg.loss.consistency_weight = 0.0;
        specs.push_back({"no-cons", cfg, 0});
        cfg = base;
        cfg.loss.cons_variant = ConsVariant::FullPairwise;
        specs.push_back({"full-pairwise", cfg, 0});
    } else if (axis == "beta") {
        for (double beta : {0.05, 0.2}) {
            RunConfig cfg = base;
            cfg.loss.consistency_weight = beta;
            std::ostringstream name;
            name << "beta-" << beta;
            specs.push_back({name.str(), cfg, 0});
        }
    } else if (axis == "K") {
        for (int k = 2; k <= 6; ++k) {
            RunConfig cfg = base;
            cfg.train.k_prompts = k;
            specs.push_back({"K-" + std::to_string(k), cfg, k});
        }
    } else {
        throw ValidationError("unknown ablation axis '" + axis + "' (loss-design, beta, K)");
    }

    TemplateBank bank = TemplateBank::builtin();
    Dataset base_train = generate_dataset(train_spec, n_train_scenes, data_seed, bank);

    AblationTable table;
    table.axis = axis;
    for (const auto& spec : specs) {
        const Dataset* train_data = &base_train;
        Dataset regenerated;
        if (spec.k_override > 0 && spec.k_override != train_spec.k_prompts) {
            DatasetGenSpec ts = train_spec;
            ts.k_prompts = spec.k_override;
            regenerated = generate_dataset(ts, n_train_scenes, data_seed, bank);
            train_data = &regenerated;
        }
        AblationCell cell;
        cell.setting = spec.setting;
        for (int s = 0; s < n_seeds; ++s) {
            RunConfig cfg = spec.cfg;
            cfg.train.seed = base.train.seed + uint64_t(s);
            TrainResult run = train(cfg, *train_data);
            RobustnessReport rep = evaluate_by_tier(model_predictor(run.state), eval_data, workers);
            cell.seeds.push_back(cfg.train.seed);
            cell.t1_scores.push_back(rep.cell(Task::AllNuclei, Tier::Low).mean);
            cell.t2_scores.push_back(rep.cell(Task::CategorySpecific, Tier::Low).mean);
        }
        cell.t1_mean = mean_of(cell.t1_scores);
        cell.t1_std = std_of(cell.t1_scores);
        cell.t2_mean = mean_of(cell.t2_scores);
        cell.t2_std = std_of(cell.t2_scores);
        table.cells.push_back(std::move(cell));
    }
    return table;
}

std::string AblationTable::to_csv() const {
    std::ostringstream os;
    os << "# " << kDiceConvention << "\n";
    os << "axis,setting,t1_low_mean,t1_low_std,t2_low_mean,t2_low_std,n_seeds\n";
    for (const auto& c : cells)
        os << axis << "," << c.setting << "," << c.t1_mean << "," << c.t1_std << "," << c.t2_mean << ","
           << c.t2_std << "," << c.seeds.size() << "\n";
    return os.str();
}

std::string AblationTable::to_json_text(const std::string& config_hash) const {
    json j;
    j["dice_convention"] = kDiceConvention;
    j["axis"] = axis;
    if (!config_hash.empty()) j["config_sha256"] = config_hash;
    json cells_json = json::array();
    for (const auto& c : cells) {
        json cj;
        cj["setting"] = c.setting;
        cj["seeds"] = c.seeds;
        cj["t1_low"] = {{"mean", c.t1_mean}, {"std", c.t1_std}, {"per_seed", c.t1_scores}};
        cj["t2_low"] = {{"mean", c.t2_mean}, {"std", c.t2_std}, {"per_seed", c.t2_scores}};
        cells_json.push_back(std::move(cj));
    }
    j["cells"] = std::move(cells_json);
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// zero-shot
// ---------------------------------------------------------------------------

ZeroShotTable zero_shot_eval(const std::vector<ZeroShotMethod>& methods,
                             const DatasetGenSpec& base_eval_spec, int n_scenes, uint64_t seed,
                             const std::vector<std::string>& presets, int workers) {
    if (methods.empty()) throw ValidationError("zero-shot evaluation needs at least one method");
    TemplateBank bank = TemplateBank::builtin();
    ZeroShotTable table;
    for (const auto& preset_name : presets) {
        DomainShiftSpec shift =
            preset_name == "identity" ? DomainShiftSpec::identity() : DomainShiftSpec::preset(preset_name);
        DatasetGenSpec gen = apply_shift(base_eval_spec, shift);
        gen.group_mode = GroupMode::Eval;
        Dataset shifted =
            generate_dataset(gen, n_scenes, mix_seed(seed, "zeroshot", fnv1a64(preset_name)), bank);

        for (const auto& method : methods) {
            ZeroShotRow row;
            row.preset = preset_name;
            row.method = method.name;
            std::vector<double> scores;
            for (size_t mi = 0; mi < method.models.size(); ++mi) {
                MaskPredictor predict = model_predictor(*method.models[mi])();
                for (const auto& g : shifted.groups) {
                    if (g.task != Task::AllNuclei || g.prompts[0].tier != Tier::Low) continue;
                    const StoredScene& scene = shifted.scene(g.image_id);
                    auto pred = predict(scene, g, g.prompts[0].text);
                    double d = dice_score(pred, shifted.mask(g.mask_id));
                    row.items.push_back({int(mi), g.image_id, d});
                    scores.push_back(d);
                }
            }
            row.mean_dice = mean_of(scores);
            table.rows.push_back(std::move(row));
        }
    }
    (void)workers;
    return table;
}

std::string ZeroShotTable::to_csv() const {
    std::ostringstream os;
    os << "# " << kDiceConvention << "\n";
    os << "preset,method,mean_dice,n_items\n";
    for (const auto& r : rows)
        os << r.preset << "," << r.method << "," << r.mean_dice << "," << r.items.size() << "\n";
    return os.str();
}

std::string ZeroShotTable::to_json_text() const {
    json j;
    j["dice_convention"] = kDiceConvention;
    json rows_json = json::array();
    for (const auto& r : rows) {
        json rj;
        rj["preset"] = r.preset;
        rj["method"] = r.method;
        rj["mean_dice"] = r.mean_dice;
        json items = json::array();
        for (const auto& it : r.items)
            items.push_back({{"model", it.model_index}, {"image_id", it.image_id}, {"dice", it.dice}});
        rj["items"] = std::move(items);
        rows_json.push_back(std::move(rj));
    }
    j["rows"] = std::move(rows_json);
    return j.dump(2);
}

}  // namespace pgat
