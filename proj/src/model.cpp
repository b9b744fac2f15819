#include "pgat/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"
#include "pgat/sha256.hpp"

using nlohmann::json;

namespace pgat {

void ModelConfig::validate() const {
    if (d_img < 1) throw ValidationError("d_img must be positive");
    if (d_text != kTextDim)
        throw ValidationError("d_text is fixed to " + std::to_string(kTextDim) +
                              " by the frozen text encoder");
    if (n_candidates < 1) throw ValidationError("need at least one mask candidate");
    if (k_select < 1 || k_select > n_candidates)
        throw ValidationError("k_select must lie in [1, n_candidates], got " +
                              std::to_string(k_select) + " with " + std::to_string(n_candidates) +
                              " candidates");
    if (enc_layers < 1 || dec_layers < 1) throw ValidationError("layer counts must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must be in (0,1)");
}

std::string model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["d_img"] = cfg.d_img;
    j["d_text"] = cfg.d_text;
    j["n_candidates"] = cfg.n_candidates;
    j["k_select"] = cfg.k_select;
    j["enc_layers"] = cfg.enc_layers;
    j["dec_layers"] = cfg.dec_layers;
    j["threshold"] = cfg.threshold;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig cfg;
    cfg.d_img = j.at("d_img").get<int>();
    cfg.d_text = j.at("d_text").get<int>();
    cfg.n_candidates = j.at("n_candidates").get<int>();
    cfg.k_select = j.at("k_select").get<int>();
    cfg.enc_layers = j.at("enc_layers").get<int>();
    cfg.dec_layers = j.at("dec_layers").get<int>();
    cfg.threshold = j.at("threshold").get<double>();
    cfg.validate();
    return cfg;
}

std::vector<ParamInfo> ModelState::registry(const ModelConfig& cfg) {
    std::vector<ParamInfo> infos;
    int d = cfg.d_img;
    for (int l = 0; l < cfg.enc_layers; ++l) {
        int cin = l == 0 ? 1 : d;
        infos.push_back({"enc" + std::to_string(l) + ".w", {d, cin, 3, 3}});
        infos.push_back({"enc" + std::to_string(l) + ".b", {d}});
    }
    infos.push_back({"film_scale.w", {d, cfg.d_text}});
    infos.push_back({"film_scale.b", {d}});
    infos.push_back({"film_shift.w", {d, cfg.d_text}});
    infos.push_back({"film_shift.b", {d}});
    for (int l = 0; l < cfg.dec_layers; ++l) {
        int cout = l == cfg.dec_layers - 1 ? cfg.n_candidates : d;
        infos.push_back({"dec" + std::to_string(l) + ".w", {cout, d, 3, 3}});
        infos.push_back({"dec" + std::to_string(l) + ".b", {cout}});
    }
    infos.push_back({"score.w", {cfg.n_candidates, d}});
    infos.push_back({"score.b", {cfg.n_candidates}});
    infos.push_back({"presence.w", {1, d}});
    infos.push_back({"presence.b", {1}});
    return infos;
}

namespace {

int fan_in_of(const ParamInfo& info, const std::vector<ParamInfo>& all) {
    const ad::Shape& s = info.shape;
    if (s.size() == 4) return s[1] * s[2] * s[3];  // conv weight
    if (s.size() == 2) return s[1];                // linear weight
    // bias: fan-in of the matching weight
    std::string wname = info.name.substr(0, info.name.size() - 2) + ".w";
    for (const auto& p : all)
        if (p.name == wname) return fan_in_of(p, all);
    return 1;
}

}  // namespace

ModelState::ModelState(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    infos_ = registry(cfg_);
    Rng rng(init_seed);
    for (const auto& info : infos_) {
        double bound = 1.0 / std::sqrt(double(fan_in_of(info, infos_)));
        std::vector<double> buf(size_t(ad::numel(info.shape)));
        for (auto& v : buf) v = rng.uniform(-bound, bound);
        buffers_[info.name] = std::move(buf);
    }
}

ModelState::ModelState(ModelConfig cfg, std::vector<double> flat) : cfg_(cfg) {
    cfg_.validate();
    infos_ = registry(cfg_);
    size_t off = 0;
    for (const auto& info : infos_) {
        size_t n = size_t(ad::numel(info.shape));
        if (off + n > flat.size()) throw ValidationError("parameter blob too short for config");
        buffers_[info.name] = std::vector<double>(flat.begin() + long(off), flat.begin() + long(off + n));
        off += n;
    }
    if (off != flat.size())
        throw ValidationError("parameter blob has " + std::to_string(flat.size()) +
                              " values, config expects " + std::to_string(off));
}

std::vector<double>& ModelState::values(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
}

const std::vector<double>& ModelState::values(const std::string& name) const {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<double> ModelState::flatten() const {
    std::vector<double> flat;
    flat.reserve(size_t(total_values()));
    for (const auto& info : infos_) {
        const auto& buf = buffers_.at(info.name);
        flat.insert(flat.end(), buf.begin(), buf.end());
    }
    return flat;
}

long ModelState::total_values() const {
    long n = 0;
    for (const auto& info : infos_) n += ad::numel(info.shape);
    return n;
}

const ad::Tensor& BoundModel::at(const std::string& name) const {
    auto it = param.find(name);
    if (it == param.end()) throw ValidationError("model has no parameter '" + name + "'");
    return it->second;
}

BoundModel bind_model(ad::Graph& g, const ModelState& state, bool requires_grad) {
    BoundModel m;
    m.cfg = state.config();
    for (const auto& info : state.params())
        m.param[info.name] = g.leaf(state.values(info.name), info.shape, requires_grad);
    return m;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

ad::Tensor run_encoder(ad::Graph& g, const BoundModel& m, const std::vector<double>& image, int h,
                       int w) {
    if (int(image.size()) != h * w)
        throw ValidationError("image buffer does not match " + std::to_string(h) + "x" +
                              std::to_string(w));
    ad::Tensor x = g.constant(image, {1, h, w});
    for (int l = 0; l < m.cfg.enc_layers; ++l) {
        std::string p = "enc" + std::to_string(l);
        x = ad::relu(ad::conv2d(x, m.at(p + ".w"), m.at(p + ".b")));
    }
    return x;
}

PromptPrediction decode_prompt(ad::Graph& g, const BoundModel& m, ad::Tensor features, int h, int w,
                               const std::vector<double>& embedding) {
    int d = m.cfg.d_img;
    int hw = h * w;
    ad::Tensor e = g.constant(embedding, {m.cfg.d_text, 1});

    // FiLM conditioning: per-channel scale and shift from the embedding
    ad::Tensor scale = ad::add(ad::matmul(m.at("film_scale.w"), e), ad::reshape(m.at("film_scale.b"), {d, 1}));
    ad::Tensor shift = ad::add(ad::matmul(m.at("film_shift.w"), e), ad::reshape(m.at("film_shift.b"), {d, 1}));
    ad::Tensor ones_row = g.constant_like(1.0, {1, hw});
    ad::Tensor scale_map = ad::reshape(ad::matmul(scale, ones_row), {d, h, w});
    ad::Tensor shift_map = ad::reshape(ad::matmul(shift, ones_row), {d, h, w});
    ad::Tensor fused = ad::add(ad::mul(features, ad::add(scale_map, g.scalar(1.0))), shift_map);

    ad::Tensor hidden = fused;
    for (int l = 0; l + 1 < m.cfg.dec_layers; ++l) {
        std::string p = "dec" + std::to_string(l);
        hidden = ad::relu(ad::conv2d(hidden, m.at(p + ".w"), m.at(p + ".b")));
    }
    std::string last = "dec" + std::to_string(m.cfg.dec_layers - 1);
    ad::Tensor candidates = ad::conv2d(hidden, m.at(last + ".w"), m.at(last + ".b"));

    // heads read the globally mean-pooled pre-output features
    ad::Tensor pooled = ad::matmul(ad::reshape(hidden, {d, hw}), g.constant_like(1.0 / double(hw), {hw, 1}));
    ad::Tensor scores = ad::reshape(
        ad::add(ad::matmul(m.at("score.w"), pooled), ad::reshape(m.at("score.b"), {m.cfg.n_candidates, 1})),
        {m.cfg.n_candidates});
    ad::Tensor presence =
        ad::add(ad::reshape(ad::matmul(m.at("presence.w"), pooled), {1}), m.at("presence.b"));

    PromptPrediction pred;
    pred.candidate_logits = candidates;
    pred.candidate_scores = scores;
    pred.presence_logit = presence;
    pred.mask_logits = aggregate_candidates(candidates, scores, m.cfg.k_select);
    return pred;
}

}  // namespace

ad::Tensor aggregate_candidates(ad::Tensor candidate_logits, ad::Tensor candidate_scores, int k_select) {
    const ad::Shape& cs = candidate_logits.shape();
    if (cs.size() != 3) throw ValidationError("candidate logits must be [N,H,W]");
    int n = cs[0], h = cs[1], w = cs[2];
    if (candidate_scores.size() != n)
        throw ValidationError("score count does not match candidate count");
    if (k_select < 1 || k_select > n)
        throw ValidationError("k_select must lie in [1, n_candidates], got " + std::to_string(k_select));

    const auto& sv = candidate_scores.values();
    std::vector<int> order(static_cast<size_t>(n), 0);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sv[size_t(a)] > sv[size_t(b)]; });

    ad::Graph& g = *candidate_logits.graph;
    std::vector<double> selector(size_t(k_select) * size_t(n), 0.0);
    for (int r = 0; r < k_select; ++r) selector[size_t(r) * size_t(n) + size_t(order[size_t(r)])] = 1.0;
    ad::Tensor sel = g.constant(std::move(selector), {k_select, n});

    ad::Tensor picked = ad::matmul(sel, ad::reshape(candidate_logits, {n, h * w}));
    return ad::reshape(ad::reduce_max(ad::reshape(picked, {k_select, h, w})), {h, w});
}

std::vector<PromptPrediction> forward_group(ad::Graph& g, const BoundModel& m,
                                            const std::vector<double>& image, int height, int width,
                                            const PromptGroup& group, const TextEncoder& enc,
                                            ForwardStats* stats) {
    if (group.prompts.empty()) throw ValidationError("cannot run forward on an empty prompt group");
    ad::Tensor features = run_encoder(g, m, image, height, width);
    if (stats) stats->encoder_runs += 1;
    std::vector<PromptPrediction> preds;
    preds.reserve(group.prompts.size());
    for (const auto& p : group.prompts)
        preds.push_back(decode_prompt(g, m, features, height, width, enc.encode(p.text)));
    return preds;
}

PromptPrediction forward_prompt(ad::Graph& g, const BoundModel& m, const std::vector<double>& image,
                                int height, int width, const std::string& text, const TextEncoder& enc,
                                ForwardStats* stats) {
    ad::Tensor features = run_encoder(g, m, image, height, width);
    if (stats) stats->encoder_runs += 1;
    return decode_prompt(g, m, features, height, width, enc.encode(text));
}

std::vector<uint8_t> predict_mask(const std::vector<double>& logits, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must be in (0,1)");
    std::vector<uint8_t> mask(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        double p = 1.0 / (1.0 + std::exp(-logits[i]));
        mask[i] = p >= threshold ? 1 : 0;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'G', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}

uint32_t get_u32(const std::string& s, size_t& off) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(s[off + size_t(i)])) << (8 * i);
    off += 4;
    return v;
}

uint64_t get_u64(const std::string& s, size_t& off) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(s[off + size_t(i)])) << (8 * i);
    off += 8;
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& state) {
    std::string blob;
    blob.append(kMagic, sizeof kMagic);
    put_u32(blob, kCheckpointVersion);
    std::string cfg = model_config_to_json(state.config());
    put_u32(blob, uint32_t(cfg.size()));
    blob += cfg;
    std::vector<double> flat = state.flatten();
    put_u64(blob, uint64_t(flat.size()));
    for (double v : flat) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(blob, bits);
    }
    blob += Sha256::of(blob);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelState load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expect) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string blob = ss.str();

    if (blob.size() < sizeof kMagic + 8 + 64) throw std::runtime_error("checkpoint truncated: " + path);
    std::string body = blob.substr(0, blob.size() - 64);
    std::string digest = blob.substr(blob.size() - 64);
    if (Sha256::of(body) != digest)
        throw std::runtime_error("checkpoint integrity check failed: " + path);

    size_t off = 0;
    if (std::memcmp(body.data(), kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    off += sizeof kMagic;
    uint32_t version = get_u32(body, off);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    uint32_t cfg_len = get_u32(body, off);
    if (off + cfg_len > body.size()) throw std::runtime_error("checkpoint truncated: " + path);
    ModelConfig cfg = model_config_from_json(body.substr(off, cfg_len));
    off += cfg_len;
    if (expect && !(cfg == *expect))
        throw ValidationError("checkpoint model config does not match the requested config");

    uint64_t count = get_u64(body, off);
    if (off + count * 8 != body.size()) throw std::runtime_error("checkpoint truncated: " + path);
    std::vector<double> flat(count);
    for (uint64_t i = 0; i < count; ++i) {
        uint64_t bits = get_u64(body, off);
        std::memcpy(&flat[i], &bits, 8);
    }
    return ModelState(cfg, std::move(flat));
}

}  // namespace pgat
