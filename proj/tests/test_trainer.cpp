#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <json.hpp>

#include "pgat/dataset.hpp"
#include "pgat/errors.hpp"
#include "pgat/rng.hpp"
#include "pgat/trainer.hpp"

using namespace pgat;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("pgat_trn_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.model.d_img = 4;
    cfg.model.n_candidates = 2;
    cfg.model.k_select = 1;
    cfg.train.learning_rate = 1e-3;
    cfg.train.epochs = 1;
    cfg.train.seed = 5;
    return cfg;
}

Dataset tiny_dataset(uint64_t seed, int scenes = 3) {
    DatasetGenSpec spec;
    spec.base.height = 16;
    spec.base.width = 16;
    spec.base.radius_min = 2.0;
    spec.base.radius_max = 4.0;
    spec.n_blobs_min = 2;
    spec.n_blobs_max = 4;
    return generate_dataset(spec, scenes, seed, TemplateBank::builtin());
}

}  // namespace

TEST_CASE("adamw leaves parameters alone when gradients vanish and decay is zero") {
    std::vector<double> p = {1.0, -2.0, 0.5};
    std::vector<double> g = {0.0, 0.0, 0.0};
    AdamState st;
    adamw_step(p, g, st, 0.1, 0.9, 0.999, 1e-8, 0.0);
    CHECK(p == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("first adamw step with unit gradient moves by about -lr") {
    std::vector<double> p = {0.0};
    std::vector<double> g = {1.0};
    AdamState st;
    double lr = 0.01;
    adamw_step(p, g, st, lr, 0.9, 0.999, 1e-8, 0.0);
    // bias correction makes mhat/sqrt(vhat) = 1 up to eps
    CHECK(p[0] == doctest::Approx(-lr).epsilon(1e-6));
}

TEST_CASE("decoupled decay shrinks parameters by (1 - lr*decay) per step") {
    std::vector<double> p = {2.0, -4.0};
    std::vector<double> g = {0.0, 0.0};
    AdamState st;
    double lr = 0.1, wd = 0.05;
    adamw_step(p, g, st, lr, 0.9, 0.999, 1e-8, wd);
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - lr * wd)).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-4.0 * (1.0 - lr * wd)).epsilon(1e-15));
}

TEST_CASE("adamw rejects non-finite gradients and shape mismatches") {
    std::vector<double> p = {1.0};
    AdamState st;
    std::vector<double> bad = {std::nan("")};
    CHECK_THROWS_AS(adamw_step(p, bad, st, 0.1, 0.9, 0.999, 1e-8, 0.0), ValidationError);
    std::vector<double> wrong = {1.0, 2.0};
    CHECK_THROWS_AS(adamw_step(p, wrong, st, 0.1, 0.9, 0.999, 1e-8, 0.0), ValidationError);
}

TEST_CASE("zero learning rate freezes the parameters") {
    RunConfig cfg = tiny_run_config();
    cfg.train.learning_rate = 0.0;
    cfg.train.weight_decay = 0.0;
    Dataset data = tiny_dataset(8);
    ModelState init(cfg.model, mix_seed(cfg.train.seed, "init"));
    TrainResult res = train(cfg, data);
    CHECK(res.state.flatten() == init.flatten());
}

TEST_CASE("identical configs and seeds give bit-identical runs") {
    RunConfig cfg = tiny_run_config();
    Dataset data = tiny_dataset(9);
    TrainResult a = train(cfg, data);
    TrainResult b = train(cfg, data);
    CHECK(a.state.flatten() == b.state.flatten());
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t i = 0; i < a.steps.size(); ++i) {
        CHECK(a.steps[i].loss.total == b.steps[i].loss.total);
        CHECK(a.steps[i].grad_norm == b.steps[i].grad_norm);
    }

    cfg.train.seed += 1;
    TrainResult c = train(cfg, data);
    CHECK(a.state.flatten() != c.state.flatten());
}

TEST_CASE("run directories capture config, steps, checkpoint and summary") {
    TempDir dir("rundir");
    RunConfig cfg = tiny_run_config();
    Dataset data = tiny_dataset(10);
    TrainResult res = train(cfg, data, dir.path.string());
    CHECK(fs::exists(dir.path / "config.json"));
    CHECK(fs::exists(dir.path / "steps.jsonl"));
    CHECK(fs::exists(dir.path / "summary.json"));
    CHECK(fs::exists(dir.path / "checkpoint.bin"));

    ModelState loaded = load_checkpoint((dir.path / "checkpoint.bin").string(), cfg.model);
    CHECK(loaded.flatten() == res.state.flatten());

    // config round-trips and is fully explicit
    RunConfig back = run_config_from_file((dir.path / "config.json").string());
    CHECK(back == cfg);
    std::ifstream cfg_in(dir.path / "config.json");
    nlohmann::json raw = nlohmann::json::parse(cfg_in);
    for (const char* key :
         {"learning_rate", "batch_size", "epochs", "k_prompts", "seed", "checkpoint_every",
          "init_checkpoint", "weight_decay", "adam_beta1", "adam_beta2", "adam_eps"})
        CHECK(raw["train"].contains(key));
}

TEST_CASE("logged totals recompute from the logged breakdown") {
    TempDir dir("recompute");
    RunConfig cfg = tiny_run_config();
    Dataset data = tiny_dataset(11);
    train(cfg, data, dir.path.string());

    std::ifstream in(dir.path / "steps.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        auto seg = j.at("l_seg").get<std::vector<double>>();
        double mean_seg = 0.0;
        for (double v : seg) mean_seg += v;
        mean_seg /= double(seg.size());
        double recomputed = mean_seg + cfg.loss.group_weight * j.at("l_group").get<double>() +
                            cfg.loss.consistency_weight * j.at("l_cons").get<double>();
        CHECK(std::abs(recomputed - j.at("l_total").get<double>()) <= 1e-9);
        ++lines;
    }
    CHECK(lines == int(data.groups.size()) * cfg.train.epochs);
}

TEST_CASE("checkpoint cadence writes periodic snapshots") {
    TempDir dir("cadence");
    RunConfig cfg = tiny_run_config();
    cfg.train.checkpoint_every = 2;
    Dataset data = tiny_dataset(12);
    train(cfg, data, dir.path.string());
    CHECK(fs::exists(dir.path / "ckpt_step2.bin"));
    CHECK(fs::exists(dir.path / "ckpt_step4.bin"));
}

TEST_CASE("a degenerate grouped run matches the per-prompt baseline step for step") {
    // K identical prompts with both regularizers off must follow the exact
    // trajectory of a K=1 run on the same scenes
    Dataset grouped = tiny_dataset(13);
    Dataset single = grouped;
    for (auto& g : grouped.groups) {
        PromptGroup copy = g;
        copy.prompts = {g.prompts[0], g.prompts[0], g.prompts[0]};
        g = copy;
    }
    for (auto& g : single.groups) g.prompts.resize(1);

    RunConfig cfg = tiny_run_config();
    cfg.train.epochs = 2;
    cfg.loss.group_weight = 0.0;
    cfg.loss.consistency_weight = 0.0;

    TrainResult a = train(cfg, grouped);
    TrainResult b = train(cfg, single);
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t i = 0; i < a.steps.size(); ++i)
        CHECK(std::abs(a.steps[i].loss.total - b.steps[i].loss.total) <= 1e-9);
    auto fa = a.state.flatten();
    auto fb = b.state.flatten();
    for (size_t i = 0; i < fa.size(); ++i) CHECK(std::abs(fa[i] - fb[i]) <= 1e-9);
}

TEST_CASE("training reduces the segmentation loss on a T1 smoke run") {
    DatasetGenSpec spec;
    spec.base.height = 16;
    spec.base.width = 16;
    spec.base.radius_min = 2.0;
    spec.base.radius_max = 4.0;
    spec.n_blobs_min = 2;
    spec.n_blobs_max = 5;
    Dataset data = generate_dataset(spec, 20, 21, TemplateBank::builtin());
    // T1 groups only
    std::vector<PromptGroup> t1;
    for (const auto& g : data.groups)
        if (g.task == Task::AllNuclei) t1.push_back(g);
    data.groups = t1;

    RunConfig cfg = tiny_run_config();
    cfg.model.d_img = 8;
    cfg.model.n_candidates = 2;
    cfg.train.learning_rate = 3e-3;
    cfg.train.epochs = 10;  // 20 scenes x 10 epochs = 200 steps
    TrainResult res = train(cfg, data);
    REQUIRE(res.steps.size() == 200);

    auto mean_seg = [&](size_t lo, size_t hi) {
        double acc = 0.0;
        for (size_t i = lo; i < hi; ++i) {
            double m = 0.0;
            for (double v : res.steps[i].loss.seg_loss) m += v;
            acc += m / double(res.steps[i].loss.seg_loss.size());
        }
        return acc / double(hi - lo);
    };
    CHECK(mean_seg(180, 200) < mean_seg(0, 20));
}

TEST_CASE("non-finite forward values abort with the failing step") {
    TempDir dir("nanabort");
    RunConfig cfg = tiny_run_config();
    // poison the initial parameters so the first forward overflows
    ModelState poisoned(cfg.model, std::vector<double>(size_t(ModelState(cfg.model, 1).total_values()), 1e200));
    std::string bad = (dir.path / "poisoned.bin").string();
    save_checkpoint(bad, poisoned);
    cfg.train.init_checkpoint = bad;

    Dataset data = tiny_dataset(14);
    try {
        train(cfg, data);
        FAIL("expected abort");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
}

TEST_CASE("groups with fewer than two prompts are rejected while regularizers are on") {
    Dataset data = tiny_dataset(15);
    for (auto& g : data.groups) g.prompts.resize(1);
    RunConfig cfg = tiny_run_config();
    CHECK_THROWS_AS(train(cfg, data), ValidationError);
}
