#include "pgat/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"

using nlohmann::json;

namespace pgat {

void adamw_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state,
                double lr, double beta1, double beta2, double eps, double weight_decay) {
    if (params.size() != grads.size()) throw ValidationError("adamw: parameter/gradient size mismatch");
    if (state.m.empty()) state.m.assign(params.size(), 0.0);
    if (state.v.empty()) state.v.assign(params.size(), 0.0);
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ValidationError("adamw: optimizer state does not match parameters");
    for (double g : grads)
        if (!std::isfinite(g)) throw ValidationError("adamw: non-finite gradient");

    state.t += 1;
    double bc1 = 1.0 - std::pow(beta1, double(state.t));
    double bc2 = 1.0 - std::pow(beta2, double(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        double p = params[i] - lr * mhat / (std::sqrt(vhat) + eps);
        params[i] = p - lr * weight_decay * p;
    }
}

namespace {

json breakdown_to_json(const StepRecord& rec) {
    const LossBreakdown& b = rec.loss;
    json j;
    j["step"] = rec.step;
    j["epoch"] = rec.epoch;
    j["image_id"] = rec.image_id;
    j["mask_id"] = rec.mask_id;
    j["l_mask"] = b.mask_loss;
    j["l_dice"] = b.dice_loss;
    j["l_presence"] = b.presence_loss;
    j["l_seg"] = b.seg_loss;
    j["q"] = b.quality;
    j["q_rel"] = b.relative_quality;
    j["w"] = b.weights;
    j["l_group"] = b.group_loss;
    j["l_cons"] = b.consistency_loss;
    j["l_total"] = b.total;
    j["grad_norm"] = rec.grad_norm;
    return j;
}

std::vector<double> image_to_unit(const StoredScene& s) {
    std::vector<double> img(s.image.size());
    for (size_t i = 0; i < img.size(); ++i) img[i] = double(s.image[i]) / 255.0;
    return img;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& data, const std::string& out_dir) {
    cfg.validate();
    apply_precision(cfg);
    if (data.groups.empty()) throw ValidationError("training dataset has no prompt groups");

    bool needs_group_terms = cfg.loss.group_weight > 0.0 || cfg.loss.consistency_weight > 0.0;
    for (const auto& g : data.groups)
        if (needs_group_terms && g.size() < 2)
            throw ValidationError("group for '" + g.image_id +
                                  "' has fewer than 2 prompts but group/consistency terms are on");

    std::ofstream step_log;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream cfg_out(out_dir + "/config.json");
        cfg_out << run_config_to_json(cfg) << "\n";
        step_log.open(out_dir + "/steps.jsonl");
        if (!step_log) throw std::runtime_error("cannot open step log in " + out_dir);
    }

    auto t0 = std::chrono::steady_clock::now();
    ModelState state = cfg.train.init_checkpoint.empty()
                           ? ModelState(cfg.model, mix_seed(cfg.train.seed, "init"))
                           : load_checkpoint(cfg.train.init_checkpoint, cfg.model);
    std::vector<double> flat = state.flatten();
    AdamState adam;

    TextEncoder encoder;
    TrainResult result{std::move(state), {}, "", 0.0};

    long step = 0;
    const auto& infos = result.state.params();

    // gradient accumulation across a batch of groups, averaged
    std::vector<double> grad_accum;
    int accum_count = 0;

    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        std::vector<size_t> order(data.groups.size());
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng(mix_seed(cfg.train.seed, "epoch-order", uint64_t(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(order_rng.below(i))]);

        for (size_t oi = 0; oi < order.size(); ++oi) {
            const PromptGroup& raw_group = data.groups[order[oi]];
            step += 1;
            try {
                PromptGroup group =
                    shuffle_group(raw_group, mix_seed(cfg.train.seed, "shuffle", uint64_t(epoch),
                                                      uint64_t(order[oi])));
                const StoredScene& scene = data.scene(group.image_id);
                std::vector<double> image = image_to_unit(scene);
                const std::vector<uint8_t>& target = data.mask(group.mask_id);

                ad::Graph graph;
                BoundModel bound = bind_model(graph, result.state, true);
                auto preds =
                    forward_group(graph, bound, image, scene.height, scene.width, group, encoder);
                TotalLossResult tl =
                    total_loss(graph, preds, target, scene.height, scene.width, cfg.loss);
                ad::GradMap grads = graph.backward(tl.total);

                double norm2 = 0.0;
                std::vector<double> flat_grads;
                flat_grads.reserve(flat.size());
                for (const auto& info : infos) {
                    const auto& g = grads.at(bound.at(info.name).id);
                    for (double v : g) {
                        flat_grads.push_back(v);
                        norm2 += v * v;
                    }
                }

                if (cfg.train.batch_size == 1) {
                    adamw_step(flat, flat_grads, adam, cfg.train.learning_rate, cfg.train.adam_beta1,
                               cfg.train.adam_beta2, cfg.train.adam_eps, cfg.train.weight_decay);
                } else {
                    if (grad_accum.empty()) grad_accum.assign(flat.size(), 0.0);
                    for (size_t i = 0; i < flat.size(); ++i) grad_accum[i] += flat_grads[i];
                    accum_count += 1;
                    if (accum_count == cfg.train.batch_size) {
                        for (double& v : grad_accum) v /= double(accum_count);
                        adamw_step(flat, grad_accum, adam, cfg.train.learning_rate,
                                   cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps,
                                   cfg.train.weight_decay);
                        grad_accum.assign(flat.size(), 0.0);
                        accum_count = 0;
                    }
                }

                size_t off = 0;
                for (const auto& info : infos) {
                    auto& buf = result.state.values(info.name);
                    std::copy(flat.begin() + long(off), flat.begin() + long(off + buf.size()),
                              buf.begin());
                    off += buf.size();
                }

                StepRecord rec;
                rec.step = step;
                rec.epoch = epoch;
                rec.image_id = group.image_id;
                rec.mask_id = group.mask_id;
                rec.loss = tl.breakdown;
                rec.grad_norm = std::sqrt(norm2);
                if (step_log.is_open()) {
                    step_log << breakdown_to_json(rec).dump() << "\n";
                    step_log.flush();
                    if (!step_log) throw std::runtime_error("step log write failed");
                }
                result.steps.push_back(std::move(rec));
            } catch (const std::exception& e) {
                if (step_log.is_open()) step_log.flush();
                throw std::runtime_error("training aborted at step " + std::to_string(step) + " (" +
                                         raw_group.image_id + "): " + e.what());
            }

            if (!out_dir.empty() && cfg.train.checkpoint_every > 0 &&
                step % cfg.train.checkpoint_every == 0) {
                save_checkpoint(out_dir + "/ckpt_step" + std::to_string(step) + ".bin", result.state);
            }
        }
    }

    if (accum_count > 0) {
        for (double& v : grad_accum) v /= double(accum_count);
        adamw_step(flat, grad_accum, adam, cfg.train.learning_rate, cfg.train.adam_beta1,
                   cfg.train.adam_beta2, cfg.train.adam_eps, cfg.train.weight_decay);
        size_t off = 0;
        for (const auto& info : infos) {
            auto& buf = result.state.values(info.name);
            std::copy(flat.begin() + long(off), flat.begin() + long(off + buf.size()), buf.begin());
            off += buf.size();
        }
    }

    auto t1 = std::chrono::steady_clock::now();
    result.wall_seconds = std::chrono::duration<double>(t1 - t0).count();

    if (!out_dir.empty()) {
        result.checkpoint_path = out_dir + "/checkpoint.bin";
        save_checkpoint(result.checkpoint_path, result.state);

        double last_epoch_seg = 0.0;
        int last_epoch_count = 0;
        for (const auto& rec : result.steps) {
            if (rec.epoch == cfg.train.epochs - 1) {
                double m = 0.0;
                for (double v : rec.loss.seg_loss) m += v;
                last_epoch_seg += m / double(rec.loss.seg_loss.size());
                last_epoch_count += 1;
            }
        }
        json summary;
        summary["name"] = cfg.name;
        summary["steps"] = step;
        summary["epochs"] = cfg.train.epochs;
        summary["mean_seg_loss_last_epoch"] =
            last_epoch_count ? last_epoch_seg / last_epoch_count : 0.0;
        summary["checkpoint"] = "checkpoint.bin";
        summary["config_sha256"] = config_hash(cfg);
        summary["wall_seconds"] = result.wall_seconds;
        std::ofstream sum_out(out_dir + "/summary.json");
        sum_out << summary.dump(2) << "\n";
    }
    return result;
}

}  // namespace pgat
