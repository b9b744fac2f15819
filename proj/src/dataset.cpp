#include "pgat/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"
#include "pgat/sha256.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pgat {

const StoredScene& Dataset::scene(const std::string& id) const {
    for (const auto& s : scenes)
        if (s.id == id) return s;
    throw ValidationError("dataset has no scene '" + id + "'");
}

const std::vector<uint8_t>& Dataset::mask(const std::string& mask_id) const {
    auto colon = mask_id.find(':');
    if (colon == std::string::npos) throw ValidationError("malformed mask id '" + mask_id + "'");
    const StoredScene& s = scene(mask_id.substr(0, colon));
    std::string key = mask_id.substr(colon + 1);
    auto it = s.masks.find(key);
    if (it == s.masks.end()) throw ValidationError("scene '" + s.id + "' has no mask '" + key + "'");
    return it->second;
}

namespace {

std::string scene_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04d", index);
    return buf;
}

json spec_to_json(const DatasetGenSpec& g) {
    json j;
    j["height"] = g.base.height;
    j["width"] = g.base.width;
    j["class_mix"] = g.base.class_mix;
    j["radius_min"] = g.base.radius_min;
    j["radius_max"] = g.base.radius_max;
    j["class_intensity"] = g.base.class_intensity;
    j["texture_noise_sigma"] = g.base.texture_noise_sigma;
    j["background_level"] = g.base.background_level;
    j["overlap_allowed"] = g.base.overlap_allowed;
    j["n_blobs_min"] = g.n_blobs_min;
    j["n_blobs_max"] = g.n_blobs_max;
    j["k_prompts"] = g.k_prompts;
    j["group_mode"] = g.group_mode == GroupMode::Train ? "train" : "eval";
    return j;
}

}  // namespace

std::string dataset_gen_spec_to_json(const DatasetGenSpec& spec) { return spec_to_json(spec).dump(2); }

DatasetGenSpec dataset_gen_spec_from_json(const std::string& text) {
    json j = json::parse(text);
    DatasetGenSpec g;
    g.base.height = j.value("height", g.base.height);
    g.base.width = j.value("width", g.base.width);
    if (j.contains("class_mix")) g.base.class_mix = j.at("class_mix").get<std::array<double, 3>>();
    g.base.radius_min = j.value("radius_min", g.base.radius_min);
    g.base.radius_max = j.value("radius_max", g.base.radius_max);
    if (j.contains("class_intensity"))
        g.base.class_intensity = j.at("class_intensity").get<std::array<double, 3>>();
    g.base.texture_noise_sigma = j.value("texture_noise_sigma", g.base.texture_noise_sigma);
    g.base.background_level = j.value("background_level", g.base.background_level);
    g.base.overlap_allowed = j.value("overlap_allowed", g.base.overlap_allowed);
    g.n_blobs_min = j.value("n_blobs_min", g.n_blobs_min);
    g.n_blobs_max = j.value("n_blobs_max", g.n_blobs_max);
    g.k_prompts = j.value("k_prompts", g.k_prompts);
    if (j.contains("group_mode")) {
        std::string m = j.at("group_mode").get<std::string>();
        if (m != "train" && m != "eval") throw ValidationError("group_mode must be train or eval");
        g.group_mode = m == "train" ? GroupMode::Train : GroupMode::Eval;
    }
    g.base.n_blobs = g.n_blobs_min;
    g.base.validate();
    return g;
}

DatasetGenSpec dataset_gen_spec_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dataset spec file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return dataset_gen_spec_from_json(ss.str());
}

DatasetGenSpec apply_shift(const DatasetGenSpec& spec, const DomainShiftSpec& shift) {
    DatasetGenSpec out = spec;
    out.base = apply_shift(spec.base, shift);
    out.n_blobs_min = int(std::lround(double(spec.n_blobs_min) * shift.blob_count_scale));
    out.n_blobs_max = int(std::lround(double(spec.n_blobs_max) * shift.blob_count_scale));
    return out;
}

Dataset generate_dataset(const DatasetGenSpec& spec, int n_scenes, uint64_t seed,
                         const TemplateBank& bank) {
    if (n_scenes < 1) throw ValidationError("dataset needs at least one scene");
    if (spec.n_blobs_min < 0 || spec.n_blobs_max < spec.n_blobs_min)
        throw ValidationError("invalid blob count range");

    Dataset ds;
    ds.seed = seed;
    ds.generator_json = spec_to_json(spec).dump();

    for (int i = 0; i < n_scenes; ++i) {
        Rng scene_rng(mix_seed(seed, "scene-params", uint64_t(i)));
        SceneSpec ss = spec.base;
        ss.n_blobs = spec.n_blobs_min +
                     int(scene_rng.below(uint64_t(spec.n_blobs_max - spec.n_blobs_min + 1)));
        ss.seed = mix_seed(seed, "scene", uint64_t(i));
        SceneData data = generate_scene(ss);

        StoredScene st;
        st.id = scene_name(i);
        st.height = data.height;
        st.width = data.width;
        st.seed = ss.seed;
        st.image.resize(data.image.size());
        for (size_t p = 0; p < data.image.size(); ++p)
            st.image[p] = uint8_t(std::lround(data.image[p] * 255.0));
        st.masks["t1"] = target_mask(data, Task::AllNuclei, std::nullopt);
        for (int c = 0; c < kNumClasses; ++c)
            st.masks["t2c" + std::to_string(c)] = target_mask(data, Task::CategorySpecific, c);

        int t2_class = int(scene_rng.below(kNumClasses));
        if (spec.group_mode == GroupMode::Train) {
            // one all-nuclei group plus one group per category; same image,
            // different prompts, different targets
            ds.groups.push_back(build_prompt_group(bank, st.id, Task::AllNuclei, std::nullopt,
                                                   spec.k_prompts, TierPolicy::mixed(),
                                                   mix_seed(seed, "group-t1", uint64_t(i))));
            for (int c = 0; c < kNumClasses; ++c)
                ds.groups.push_back(build_prompt_group(
                    bank, st.id, Task::CategorySpecific, c, spec.k_prompts, TierPolicy::mixed(),
                    mix_seed(seed, "group-t2", uint64_t(i), uint64_t(c))));
        } else {
            for (Tier tier : {Tier::Low, Tier::Medium, Tier::High}) {
                ds.groups.push_back(build_prompt_group(
                    bank, st.id, Task::AllNuclei, std::nullopt, 2, TierPolicy::single(tier),
                    mix_seed(seed, "eval-t1", uint64_t(i), uint64_t(tier))));
                ds.groups.push_back(build_prompt_group(
                    bank, st.id, Task::CategorySpecific, t2_class, 2, TierPolicy::single(tier),
                    mix_seed(seed, "eval-t2", uint64_t(i), uint64_t(tier))));
            }
        }
        ds.scenes.push_back(std::move(st));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// PGM and manifest I/O
// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, int height, int width, const std::vector<uint8_t>& gray) {
    if (int(gray.size()) != height * width) throw ValidationError("pgm buffer does not match extents");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data()), std::streamsize(gray.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<uint8_t> read_pgm(const std::string& path, int& height, int& width) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("not a binary PGM file: " + path);
    auto next_token = [&]() -> long {
        // skip whitespace and '#' comments
        int c = in.peek();
        while (c != EOF && (std::isspace(c) || c == '#')) {
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else {
                in.get();
            }
            c = in.peek();
        }
        long v;
        if (!(in >> v)) throw std::runtime_error("malformed PGM header: " + path);
        return v;
    };
    long w = next_token(), h = next_token(), maxval = next_token();
    if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("unsupported PGM format: " + path);
    in.get();  // single whitespace after maxval
    std::vector<uint8_t> data(size_t(w) * size_t(h));
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size()));
    if (in.gcount() != std::streamsize(data.size()))
        throw std::runtime_error("truncated PGM file: " + path);
    height = int(h);
    width = int(w);
    return data;
}

namespace {

json group_to_json(const PromptGroup& g) {
    json j;
    j["image_id"] = g.image_id;
    j["task"] = task_name(g.task);
    if (g.task == Task::CategorySpecific) j["class_id"] = g.class_id;
    j["mask_id"] = g.mask_id;
    json prompts = json::array();
    for (const auto& p : g.prompts) prompts.push_back({{"text", p.text}, {"tier", tier_name(p.tier)}});
    j["prompts"] = std::move(prompts);
    return j;
}

PromptGroup group_from_json(const json& j) {
    PromptGroup g;
    g.image_id = j.at("image_id").get<std::string>();
    g.task = task_from_name(j.at("task").get<std::string>());
    g.class_id = g.task == Task::CategorySpecific ? j.at("class_id").get<int>() : -1;
    g.mask_id = j.at("mask_id").get<std::string>();
    for (const auto& p : j.at("prompts"))
        g.prompts.push_back({p.at("text").get<std::string>(), tier_from_name(p.at("tier").get<std::string>())});
    return g;
}

std::vector<uint8_t> mask_to_gray(const std::vector<uint8_t>& mask) {
    std::vector<uint8_t> gray(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) gray[i] = mask[i] ? 255 : 0;
    return gray;
}

std::vector<uint8_t> gray_to_mask(const std::vector<uint8_t>& gray, const std::string& path) {
    std::vector<uint8_t> mask(gray.size());
    for (size_t i = 0; i < gray.size(); ++i) {
        if (gray[i] == 255)
            mask[i] = 1;
        else if (gray[i] == 0)
            mask[i] = 0;
        else
            throw std::runtime_error("mask file has non-binary pixel value " +
                                     std::to_string(int(gray[i])) + ": " + path);
    }
    return mask;
}

std::string file_sha(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    Sha256 h;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(buf, size_t(in.gcount()));
    }
    return h.hex_digest();
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& ds) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = ds.format;
    manifest["seed"] = ds.seed;
    manifest["generator"] = json::parse(ds.generator_json.empty() ? "{}" : ds.generator_json);

    json scenes = json::array();
    for (const auto& s : ds.scenes) {
        json js;
        js["id"] = s.id;
        js["height"] = s.height;
        js["width"] = s.width;
        js["seed"] = s.seed;
        std::string image_file = s.id + ".pgm";
        write_pgm(dir + "/" + image_file, s.height, s.width, s.image);
        js["image"] = image_file;
        json masks, checksums;
        checksums[image_file] = file_sha(dir + "/" + image_file);
        for (const auto& [key, mask] : s.masks) {
            std::string mask_file = s.id + "_" + key + ".pgm";
            write_pgm(dir + "/" + mask_file, s.height, s.width, mask_to_gray(mask));
            masks[key] = mask_file;
            checksums[mask_file] = file_sha(dir + "/" + mask_file);
        }
        js["masks"] = std::move(masks);
        js["checksums"] = std::move(checksums);
        scenes.push_back(std::move(js));
    }
    manifest["scenes"] = std::move(scenes);

    json groups = json::array();
    for (const auto& g : ds.groups) groups.push_back(group_to_json(g));
    manifest["groups"] = std::move(groups);

    std::ofstream out(dir + "/manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("manifest write failed in " + dir);
}

Dataset read_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("cannot open manifest: " + dir + "/manifest.json");
    json manifest = json::parse(in);
    if (manifest.at("format").get<int>() != 1)
        throw std::runtime_error("unsupported dataset format version " +
                                 std::to_string(manifest.at("format").get<int>()));

    Dataset ds;
    ds.format = 1;
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.generator_json = manifest.at("generator").dump();

    std::set<std::string> referenced;
    for (const auto& js : manifest.at("scenes")) {
        StoredScene s;
        s.id = js.at("id").get<std::string>();
        s.seed = js.at("seed").get<uint64_t>();
        int want_h = js.at("height").get<int>();
        int want_w = js.at("width").get<int>();

        auto checked_read = [&](const std::string& file) {
            std::string path = dir + "/" + file;
            std::string expect = js.at("checksums").at(file).get<std::string>();
            std::string got = file_sha(path);
            if (got != expect)
                throw std::runtime_error("checksum mismatch for '" + file + "' in scene '" + s.id +
                                         "': manifest " + expect + ", file " + got);
            int h = 0, w = 0;
            auto gray = read_pgm(path, h, w);
            if (h != want_h || w != want_w)
                throw std::runtime_error("extent mismatch for '" + file + "'");
            referenced.insert(file);
            return gray;
        };

        std::string image_file = js.at("image").get<std::string>();
        s.image = checked_read(image_file);
        s.height = want_h;
        s.width = want_w;
        for (const auto& [key, file] : js.at("masks").items())
            s.masks[key] = gray_to_mask(checked_read(file.get<std::string>()), file.get<std::string>());
        ds.scenes.push_back(std::move(s));
    }

    size_t on_disk = 0;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".pgm") ++on_disk;
    if (on_disk != referenced.size())
        throw std::runtime_error("manifest references " + std::to_string(referenced.size()) +
                                 " pgm files but the directory holds " + std::to_string(on_disk));

    for (const auto& jg : manifest.at("groups")) ds.groups.push_back(group_from_json(jg));
    return ds;
}

}  // namespace pgat
