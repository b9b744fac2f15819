#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pgat/dataset.hpp"
#include "pgat/errors.hpp"
#include "pgat/eval.hpp"
#include "pgat/gradcheck.hpp"
#include "pgat/model.hpp"
#include "pgat/run_config.hpp"
#include "pgat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// flag > config > PGAT_SEED > fallback
uint64_t resolve_seed(const std::optional<uint64_t>& flag, const std::optional<uint64_t>& from_config,
                      uint64_t fallback) {
    if (flag) return *flag;
    if (from_config) return *from_config;
    if (const char* env = std::getenv("PGAT_SEED")) return std::strtoull(env, nullptr, 10);
    return fallback;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

pgat::TemplateBank load_bank(const std::string& templates_path) {
    return templates_path.empty() ? pgat::TemplateBank::builtin()
                                  : pgat::TemplateBank::from_file(templates_path);
}

int cmd_gen_data(const std::string& out_dir, int n_scenes, const std::string& spec_path,
                 const std::string& shift_preset, std::optional<uint64_t> seed_flag,
                 const std::string& groups_mode, int k, const std::string& templates_path) {
    pgat::DatasetGenSpec spec;
    if (!spec_path.empty()) spec = pgat::dataset_gen_spec_from_file(spec_path);
    if (!groups_mode.empty()) {
        if (groups_mode != "train" && groups_mode != "eval")
            throw pgat::ValidationError("--groups must be train or eval");
        spec.group_mode = groups_mode == "train" ? pgat::GroupMode::Train : pgat::GroupMode::Eval;
    }
    if (k > 0) spec.k_prompts = k;
    if (!shift_preset.empty()) spec = pgat::apply_shift(spec, pgat::DomainShiftSpec::preset(shift_preset));

    uint64_t seed = resolve_seed(seed_flag, std::nullopt, 42);
    pgat::Dataset ds = pgat::generate_dataset(spec, n_scenes, seed, load_bank(templates_path));
    pgat::write_dataset(out_dir, ds);
    std::cerr << "wrote " << ds.scenes.size() << " scenes, " << ds.groups.size() << " groups to "
              << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<uint64_t> seed_flag, const std::string& data_override) {
    std::ifstream in(config_path);
    if (!in) throw pgat::ValidationError("cannot open config file: " + config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    json raw = json::parse(ss.str());
    pgat::RunConfig cfg = pgat::run_config_from_json(ss.str());

    std::optional<uint64_t> cfg_seed;
    if (raw.contains("train") && raw["train"].contains("seed"))
        cfg_seed = raw["train"]["seed"].get<uint64_t>();
    cfg.train.seed = resolve_seed(seed_flag, cfg_seed, cfg.train.seed);
    if (!data_override.empty()) cfg.train_data = data_override;
    if (cfg.train_data.empty()) throw pgat::ValidationError("no training dataset configured");

    pgat::Dataset data = pgat::read_dataset(cfg.train_data);
    pgat::TrainResult result = pgat::train(cfg, data, out_dir);
    std::cerr << "trained " << result.steps.size() << " steps in " << result.wall_seconds
              << "s; checkpoint at " << result.checkpoint_path << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out_dir,
             int workers) {
    pgat::ModelState state = pgat::load_checkpoint(checkpoint);
    pgat::Dataset data = pgat::read_dataset(data_dir);
    pgat::RobustnessReport report =
        pgat::evaluate_by_tier(pgat::model_predictor(state), data, workers);
    if (out_dir.empty()) {
        std::cout << report.to_csv();
    } else {
        fs::create_directories(out_dir);
        write_text(out_dir + "/eval_report.csv", report.to_csv());
        write_text(out_dir + "/eval_report.json", report.to_json_text());
        std::cerr << "wrote evaluation report to " << out_dir << "\n";
    }
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axis, const std::string& spec_path,
               int n_scenes, std::optional<uint64_t> data_seed_flag, const std::string& eval_data_dir,
               const std::string& out_dir, int n_seeds, int workers) {
    pgat::RunConfig base = pgat::run_config_from_file(config_path);
    pgat::DatasetGenSpec spec;
    if (!spec_path.empty()) spec = pgat::dataset_gen_spec_from_file(spec_path);
    spec.group_mode = pgat::GroupMode::Train;
    spec.k_prompts = base.train.k_prompts;
    pgat::Dataset eval_data = pgat::read_dataset(eval_data_dir);
    uint64_t data_seed = resolve_seed(data_seed_flag, std::nullopt, 42);

    pgat::AblationTable table =
        pgat::run_ablation(base, spec, n_scenes, data_seed, eval_data, axis, n_seeds, workers);
    if (out_dir.empty()) {
        std::cout << table.to_csv();
    } else {
        fs::create_directories(out_dir);
        write_text(out_dir + "/ablation_" + axis + ".csv", table.to_csv());
        write_text(out_dir + "/ablation_" + axis + ".json", table.to_json_text(pgat::config_hash(base)));
        std::cerr << "wrote ablation table to " << out_dir << "\n";
    }
    return 0;
}

int cmd_zeroshot(const std::string& full_ckpts, const std::string& baseline_ckpts,
                 const std::string& presets_csv, const std::string& spec_path, int n_scenes,
                 std::optional<uint64_t> seed_flag, const std::string& out_dir, int workers) {
    pgat::DatasetGenSpec spec;
    if (!spec_path.empty()) spec = pgat::dataset_gen_spec_from_file(spec_path);
    uint64_t seed = resolve_seed(seed_flag, std::nullopt, 42);

    std::vector<pgat::ModelState> storage;
    auto load_all = [&](const std::string& csv) {
        std::vector<size_t> idx;
        for (const auto& path : split_csv(csv)) {
            storage.push_back(pgat::load_checkpoint(path));
            idx.push_back(storage.size() - 1);
        }
        return idx;
    };
    auto full_idx = load_all(full_ckpts);
    auto base_idx = load_all(baseline_ckpts);
    if (full_idx.empty() || base_idx.empty())
        throw pgat::ValidationError("zeroshot needs at least one checkpoint per method");

    std::vector<pgat::ZeroShotMethod> methods(2);
    methods[0].name = "full";
    for (size_t i : full_idx) methods[0].models.push_back(&storage[i]);
    methods[1].name = "baseline";
    for (size_t i : base_idx) methods[1].models.push_back(&storage[i]);

    auto presets = split_csv(presets_csv);
    if (presets.empty()) throw pgat::ValidationError("no presets given");
    pgat::ZeroShotTable table = pgat::zero_shot_eval(methods, spec, n_scenes, seed, presets, workers);
    if (out_dir.empty()) {
        std::cout << table.to_csv();
    } else {
        fs::create_directories(out_dir);
        write_text(out_dir + "/zeroshot.csv", table.to_csv());
        write_text(out_dir + "/zeroshot.json", table.to_json_text());
        std::cerr << "wrote zero-shot table to " << out_dir << "\n";
    }
    return 0;
}

int cmd_gradcheck(int trials, const std::string& precision, std::optional<uint64_t> seed_flag,
                  double eps_flag) {
    if (precision != "f64" && precision != "f32")
        throw pgat::ValidationError("--precision must be f64 or f32");
    bool f32 = precision == "f32";
    pgat::ad::set_precision(f32 ? pgat::ad::Precision::f32 : pgat::ad::Precision::f64);
    double eps = eps_flag > 0.0 ? eps_flag : (f32 ? 1e-3 : 1e-5);
    double limit = f32 ? 1e-3 : 1e-5;
    uint64_t seed = resolve_seed(seed_flag, std::nullopt, 20260808);

    auto res = pgat::ad::run_gradcheck_suite(trials, seed, /*include_stop_grad=*/true, eps);
    std::cout << "gradcheck: " << res.cases << " graphs (" << res.stop_grad_cases
              << " with stop-gradient), max relative error " << res.max_err << " (limit " << limit
              << ", precision " << precision << ")\n";
    return res.max_err <= limit ? 0 : 2;
}

int cmd_report(const std::string& runs_dir, const std::string& out_path) {
    std::ostringstream csv;
    csv << "run,name,steps,epochs,mean_seg_loss_last_epoch,config_sha256,wall_seconds\n";
    int found = 0;
    std::vector<fs::path> summaries;
    for (const auto& entry : fs::recursive_directory_iterator(runs_dir))
        if (entry.is_regular_file() && entry.path().filename() == "summary.json")
            summaries.push_back(entry.path());
    std::sort(summaries.begin(), summaries.end());
    for (const auto& path : summaries) {
        std::ifstream in(path);
        json j = json::parse(in);
        csv << fs::relative(path.parent_path(), runs_dir).string() << ","
            << j.value("name", std::string("?")) << "," << j.value("steps", 0L) << ","
            << j.value("epochs", 0) << "," << j.value("mean_seg_loss_last_epoch", 0.0) << ","
            << j.value("config_sha256", std::string()) << "," << j.value("wall_seconds", 0.0) << "\n";
        ++found;
    }
    if (found == 0) throw pgat::ValidationError("no summary.json files under " + runs_dir);
    if (out_path.empty())
        std::cout << csv.str();
    else
        write_text(out_path, csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt group-aware training lab for text-guided nuclei segmentation"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_out, gen_spec, gen_shift, gen_groups, gen_templates;
    int gen_scenes = 50, gen_k = 0;
    std::optional<uint64_t> gen_seed;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n-scenes", gen_scenes, "number of scenes")->required();
    gen->add_option("--spec", gen_spec, "dataset spec JSON file");
    gen->add_option("--shift", gen_shift, "domain shift preset (density, size, noise)");
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--groups", gen_groups, "group mode: train or eval");
    gen->add_option("--k", gen_k, "prompts per training group");
    gen->add_option("--templates", gen_templates, "template bank JSON overriding the built-in bank");

    // train
    auto* tr = app.add_subcommand("train", "train a model from a run config");
    std::string tr_config, tr_out, tr_data;
    std::optional<uint64_t> tr_seed;
    tr->add_option("--config", tr_config, "run config JSON file")->required();
    tr->add_option("--out", tr_out, "run output directory")->required();
    tr->add_option("--seed", tr_seed, "seed override");
    tr->add_option("--data", tr_data, "training dataset directory override");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint by prompt tier");
    std::string ev_ckpt, ev_data, ev_out;
    int ev_workers = 1;
    bool ev_by_tier = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "evaluation dataset directory")->required();
    ev->add_flag("--by-tier", ev_by_tier, "report per prompt-quality tier (default mode)");
    ev->add_option("--out", ev_out, "report output directory (default: CSV to stdout)");
    ev->add_option("--workers", ev_workers, "evaluation worker threads");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run an ablation axis");
    std::string ab_config, ab_axis, ab_spec, ab_eval, ab_out;
    int ab_scenes = 24, ab_seeds = 5, ab_workers = 1;
    std::optional<uint64_t> ab_data_seed;
    ab->add_option("--config", ab_config, "base run config JSON file")->required();
    ab->add_option("--axis", ab_axis, "loss-design, beta or K")->required();
    ab->add_option("--spec", ab_spec, "training dataset spec JSON");
    ab->add_option("--scenes", ab_scenes, "training scenes per cell");
    ab->add_option("--data-seed", ab_data_seed, "training dataset seed");
    ab->add_option("--eval-data", ab_eval, "evaluation dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory (default: CSV to stdout)");
    ab->add_option("--seeds", ab_seeds, "seeds per cell (minimum 5)");
    ab->add_option("--workers", ab_workers, "evaluation worker threads");

    // zeroshot
    auto* zs = app.add_subcommand("zeroshot", "zero-shot domain-shift comparison");
    std::string zs_full, zs_base, zs_presets = "density,size,noise", zs_spec, zs_out;
    int zs_scenes = 16, zs_workers = 1;
    std::optional<uint64_t> zs_seed;
    zs->add_option("--full", zs_full, "comma-separated full-method checkpoints")->required();
    zs->add_option("--baseline", zs_base, "comma-separated baseline checkpoints")->required();
    zs->add_option("--presets", zs_presets, "comma-separated shift presets");
    zs->add_option("--spec", zs_spec, "base evaluation dataset spec JSON");
    zs->add_option("--scenes", zs_scenes, "scenes per preset");
    zs->add_option("--seed", zs_seed, "evaluation seed");
    zs->add_option("--out", zs_out, "output directory (default: CSV to stdout)");
    zs->add_option("--workers", zs_workers, "evaluation worker threads");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of the autodiff core");
    int gc_trials = 100;
    std::string gc_precision = "f64";
    std::optional<uint64_t> gc_seed;
    double gc_eps = 0.0;
    gc->add_option("--trials", gc_trials, "number of random graphs");
    gc->add_option("--precision", gc_precision, "f64 or f32");
    gc->add_option("--seed", gc_seed, "suite seed");
    gc->add_option("--eps", gc_eps, "finite-difference step (default per precision)");

    // report
    auto* rp = app.add_subcommand("report", "aggregate run summaries into CSV");
    std::string rp_runs, rp_out;
    rp->add_option("--runs", rp_runs, "directory holding run outputs")->required();
    rp->add_option("--out", rp_out, "CSV output file (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help goes to stdout, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_scenes, gen_spec, gen_shift, gen_seed, gen_groups, gen_k,
                                gen_templates);
        if (tr->parsed()) return cmd_train(tr_config, tr_out, tr_seed, tr_data);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_out, ev_workers);
        if (ab->parsed())
            return cmd_ablate(ab_config, ab_axis, ab_spec, ab_scenes, ab_data_seed, ab_eval, ab_out,
                              ab_seeds, ab_workers);
        if (zs->parsed())
            return cmd_zeroshot(zs_full, zs_base, zs_presets, zs_spec, zs_scenes, zs_seed, zs_out,
                                zs_workers);
        if (gc->parsed()) return cmd_gradcheck(gc_trials, gc_precision, gc_seed, gc_eps);
        if (rp->parsed()) return cmd_report(rp_runs, rp_out);
    } catch (const pgat::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
