#include "pgat/run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pgat/errors.hpp"
#include "pgat/sha256.hpp"

using nlohmann::json;

namespace pgat {

void TrainConfig::validate() const {
    if (learning_rate < 0.0) throw ValidationError("learning rate must be non-negative");
    if (batch_size < 1) throw ValidationError("batch size must be at least 1");
    if (epochs < 1) throw ValidationError("epochs must be at least 1");
    if (k_prompts < 1) throw ValidationError("k_prompts must be at least 1");
    if (checkpoint_every < 0) throw ValidationError("checkpoint cadence must be non-negative");
    if (weight_decay < 0.0) throw ValidationError("weight decay must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw ValidationError("adam betas must lie in [0,1)");
    if (adam_eps <= 0.0) throw ValidationError("adam eps must be positive");
}

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    train.validate();
    if (precision != "f64" && precision != "f32")
        throw ValidationError("precision must be f64 or f32, got '" + precision + "'");
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["name"] = cfg.name;
    j["model"] = json::parse(model_config_to_json(cfg.model));
    j["loss"] = {{"temperature", cfg.loss.temperature},
                 {"group_weight", cfg.loss.group_weight},
                 {"consistency_weight", cfg.loss.consistency_weight},
                 {"dice_smoothing", cfg.loss.dice_smoothing},
                 {"group_grad_mode", group_grad_mode_name(cfg.loss.group_grad_mode)},
                 {"cons_norm", cons_norm_name(cfg.loss.cons_norm)},
                 {"cons_variant", cons_variant_name(cfg.loss.cons_variant)}};
    j["train"] = {{"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"epochs", cfg.train.epochs},
                  {"k_prompts", cfg.train.k_prompts},
                  {"seed", cfg.train.seed},
                  {"checkpoint_every", cfg.train.checkpoint_every},
                  {"init_checkpoint", cfg.train.init_checkpoint},
                  {"weight_decay", cfg.train.weight_decay},
                  {"adam_beta1", cfg.train.adam_beta1},
                  {"adam_beta2", cfg.train.adam_beta2},
                  {"adam_eps", cfg.train.adam_eps}};
    j["train_data"] = cfg.train_data;
    j["eval_data"] = cfg.eval_data;
    j["precision"] = cfg.precision;
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
    json j = json::parse(text);
    RunConfig cfg;
    cfg.name = j.value("name", cfg.name);
    if (j.contains("model")) cfg.model = model_config_from_json(j.at("model").dump());
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        cfg.loss.temperature = l.value("temperature", cfg.loss.temperature);
        cfg.loss.group_weight = l.value("group_weight", cfg.loss.group_weight);
        cfg.loss.consistency_weight = l.value("consistency_weight", cfg.loss.consistency_weight);
        cfg.loss.dice_smoothing = l.value("dice_smoothing", cfg.loss.dice_smoothing);
        if (l.contains("group_grad_mode"))
            cfg.loss.group_grad_mode = group_grad_mode_from_name(l.at("group_grad_mode").get<std::string>());
        if (l.contains("cons_norm"))
            cfg.loss.cons_norm = cons_norm_from_name(l.at("cons_norm").get<std::string>());
        if (l.contains("cons_variant"))
            cfg.loss.cons_variant = cons_variant_from_name(l.at("cons_variant").get<std::string>());
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.k_prompts = t.value("k_prompts", cfg.train.k_prompts);
        cfg.train.seed = t.value("seed", cfg.train.seed);
        cfg.train.checkpoint_every = t.value("checkpoint_every", cfg.train.checkpoint_every);
        cfg.train.init_checkpoint = t.value("init_checkpoint", cfg.train.init_checkpoint);
        cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
        cfg.train.adam_beta1 = t.value("adam_beta1", cfg.train.adam_beta1);
        cfg.train.adam_beta2 = t.value("adam_beta2", cfg.train.adam_beta2);
        cfg.train.adam_eps = t.value("adam_eps", cfg.train.adam_eps);
    }
    cfg.train_data = j.value("train_data", cfg.train_data);
    cfg.eval_data = j.value("eval_data", cfg.eval_data);
    cfg.precision = j.value("precision", cfg.precision);
    cfg.validate();
    return cfg;
}

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str());
}

std::string config_hash(const RunConfig& cfg) { return Sha256::of(run_config_to_json(cfg)); }

void apply_precision(const RunConfig& cfg) {
    ad::set_precision(cfg.precision == "f32" ? ad::Precision::f32 : ad::Precision::f64);
}

}  // namespace pgat
