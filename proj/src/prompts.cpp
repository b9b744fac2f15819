#include "pgat/prompts.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"

namespace pgat {

const char* task_name(Task t) { return t == Task::AllNuclei ? "t1" : "t2"; }
const char* tier_name(Tier t) {
    switch (t) {
        case Tier::Low: return "low";
        case Tier::Medium: return "medium";
        default: return "high";
    }
}

Task task_from_name(const std::string& s) {
    if (s == "t1") return Task::AllNuclei;
    if (s == "t2") return Task::CategorySpecific;
    throw ValidationError("unknown task '" + s + "' (expected t1 or t2)");
}

Tier tier_from_name(const std::string& s) {
    if (s == "low") return Tier::Low;
    if (s == "medium") return Tier::Medium;
    if (s == "high") return Tier::High;
    throw ValidationError("unknown tier '" + s + "' (expected low, medium or high)");
}

namespace {

const std::vector<std::string>& high_tier_markers() {
    static const std::vector<std::string> markers = {
        "excluding", "except", "ignoring", "leaving",  "across", "within", "throughout",
        "anywhere",  "background", "region", "field",  "area",   "image",  "slide",
        "view",      "surrounding"};
    return markers;
}

}  // namespace

TemplateBank TemplateBank::builtin() {
    TemplateBank b;
    b.set_cell(Task::AllNuclei, Tier::Low,
               {"nuclei", "segment nuclei", "all nuclei", "find nuclei", "mask nuclei",
                "segment all nuclei", "every nucleus", "show nuclei"});
    b.set_cell(Task::AllNuclei, Tier::Medium,
               {"segment all nuclei in the image", "find every cell nucleus present",
                "mask all the nuclei regions", "segment each nucleus in view",
                "all cell nuclei in this image", "highlight every nucleus in the tissue"});
    b.set_cell(Task::AllNuclei, Tier::High,
               {"segment every cell nucleus across the entire image, excluding all background tissue",
                "find and mask all nuclei anywhere in the field, ignoring the empty background",
                "carefully segment all cell nuclei within the whole tissue region, except any stain debris",
                "mark every nucleus you can see across the slide, leaving the background region out",
                "segment all nuclei of every category throughout the image area, excluding non-nuclear material",
                "produce a mask covering each nucleus within the full field of view, background excluded"});
    // low-tier category prompts deliberately reuse the all-nuclei phrasing;
    // the class token is the only cue, mirroring underspecified language
    b.set_cell(Task::CategorySpecific, Tier::Low,
               {"{class} nuclei", "segment {class} nuclei", "mask {class} nuclei",
                "find {class} nuclei", "all {class} nuclei", "show {class} nuclei",
                "every {class} nucleus", "{class} cell nuclei"});
    b.set_cell(Task::CategorySpecific, Tier::Medium,
               {"segment the {class} nuclei here", "all {class} nuclei in the image",
                "find nuclei of the {class} type", "mask every {class} nucleus present",
                "the {class} cell nuclei in view", "select the {class} type of nuclei"});
    b.set_cell(Task::CategorySpecific, Tier::High,
               {"segment only the {class} cell nuclei across the image, excluding every other category",
                "find all {class} nuclei anywhere in the tissue, ignoring nuclei of different categories",
                "mask each {class} nucleus within the whole field, excluding background and other cell types",
                "carefully segment the {class} nuclei throughout the image region, leaving all other nuclei out",
                "produce a mask of every {class} nucleus across the slide, except non-matching categories",
                "highlight all nuclei belonging to the {class} category within the image, excluding everything else"});
    b.validate();
    return b;
}

const std::vector<std::string>& TemplateBank::cell(Task task, Tier tier) const {
    auto it = cells_.find({int(task), int(tier)});
    if (it == cells_.end())
        throw ValidationError(std::string("template bank has no cell for (") + task_name(task) + ", " +
                              tier_name(tier) + ")");
    return it->second;
}

void TemplateBank::set_cell(Task task, Tier tier, std::vector<std::string> templates) {
    cells_[{int(task), int(tier)}] = std::move(templates);
}

std::string TemplateBank::instantiate(const std::string& tmpl, const std::string& class_name) {
    std::string out = tmpl;
    const std::string slot = "{class}";
    size_t pos;
    while ((pos = out.find(slot)) != std::string::npos) out.replace(pos, slot.size(), class_name);
    return out;
}

int TemplateBank::word_count(const std::string& text) {
    std::istringstream is(text);
    std::string w;
    int n = 0;
    while (is >> w) ++n;
    return n;
}

void TemplateBank::validate() const {
    for (Task task : {Task::AllNuclei, Task::CategorySpecific}) {
        std::vector<std::string> seen;
        for (Tier tier : {Tier::Low, Tier::Medium, Tier::High}) {
            const auto& ts = cell(task, tier);
            if (ts.size() < 4)
                throw ValidationError(std::string("template bank cell (") + task_name(task) + ", " +
                                      tier_name(tier) + ") has " + std::to_string(ts.size()) +
                                      " templates, need at least 4");
            for (const auto& t : ts) {
                if (std::find(seen.begin(), seen.end(), t) != seen.end())
                    throw ValidationError("duplicate template in bank: '" + t + "'");
                seen.push_back(t);
                for (const char* cls : kClassNames) {
                    std::string filled = instantiate(t, cls);
                    int wc = word_count(filled);
                    if (tier == Tier::Low && wc > 3)
                        throw ValidationError("low-tier template '" + t + "' fills to " +
                                              std::to_string(wc) + " words (max 3)");
                    if (tier == Tier::High) {
                        if (wc < 8)
                            throw ValidationError("high-tier template '" + t + "' fills to " +
                                                  std::to_string(wc) + " words (min 8)");
                        bool marked = false;
                        for (const auto& m : high_tier_markers())
                            if (filled.find(m) != std::string::npos) marked = true;
                        if (!marked)
                            throw ValidationError("high-tier template '" + t +
                                                  "' lacks a spatial or exclusion cue");
                    }
                }
            }
        }
    }
}

TemplateBank TemplateBank::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TemplateBank b;
    for (Task task : {Task::AllNuclei, Task::CategorySpecific}) {
        for (Tier tier : {Tier::Low, Tier::Medium, Tier::High}) {
            const auto& arr = j.at(task_name(task)).at(tier_name(tier));
            b.set_cell(task, tier, arr.get<std::vector<std::string>>());
        }
    }
    b.validate();
    return b;
}

TemplateBank TemplateBank::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open template bank file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string TemplateBank::to_json_text() const {
    nlohmann::json j;
    for (Task task : {Task::AllNuclei, Task::CategorySpecific})
        for (Tier tier : {Tier::Low, Tier::Medium, Tier::High})
            j[task_name(task)][tier_name(tier)] = cell(task, tier);
    return j.dump(2);
}

std::string mask_id_for(const std::string& scene_id, Task task, int class_id) {
    if (task == Task::AllNuclei) return scene_id + ":t1";
    return scene_id + ":t2c" + std::to_string(class_id);
}

PromptGroup build_prompt_group(const TemplateBank& bank, const std::string& scene_id, Task task,
                               std::optional<int> class_id, int k, TierPolicy policy, uint64_t seed) {
    if (k < 2) throw ValidationError("prompt group size must be at least 2, got " + std::to_string(k));
    if (task == Task::CategorySpecific) {
        if (!class_id) throw ValidationError("category-specific group requires a class id");
        if (*class_id < 0 || *class_id >= kNumClasses)
            throw ValidationError("class id out of range: " + std::to_string(*class_id));
    } else if (class_id) {
        throw ValidationError("all-nuclei group must not carry a class id");
    }

    std::string cls = task == Task::CategorySpecific ? kClassNames[size_t(*class_id)] : "";
    Rng rng(seed);

    // unused template indices per tier
    std::array<std::vector<int>, 3> remaining;
    auto tiers_in_policy = [&]() -> std::vector<Tier> {
        if (policy.kind == TierPolicy::Kind::SingleTier) return {policy.tier};
        return {Tier::Low, Tier::Medium, Tier::High};
    }();
    int available = 0;
    for (Tier t : tiers_in_policy) {
        const auto& ts = bank.cell(task, t);
        auto& rem = remaining[size_t(t)];
        rem.resize(ts.size());
        for (size_t i = 0; i < ts.size(); ++i) rem[i] = int(i);
        available += int(ts.size());
    }
    if (k > available)
        throw ValidationError("requested " + std::to_string(k) + " prompts but only " +
                              std::to_string(available) + " distinct templates are available");

    PromptGroup group;
    group.image_id = scene_id;
    group.task = task;
    group.class_id = task == Task::CategorySpecific ? *class_id : -1;
    group.mask_id = mask_id_for(scene_id, task, group.class_id);

    for (int slot = 0; slot < k; ++slot) {
        Tier tier;
        if (policy.kind == TierPolicy::Kind::SingleTier) {
            tier = policy.tier;
        } else {
            tier = Tier(rng.below(3));
            if (remaining[size_t(tier)].empty()) {
                std::vector<Tier> alive;
                for (Tier t : tiers_in_policy)
                    if (!remaining[size_t(t)].empty()) alive.push_back(t);
                tier = alive[size_t(rng.below(alive.size()))];
            }
        }
        auto& rem = remaining[size_t(tier)];
        if (rem.empty())
            throw ValidationError("tier " + std::string(tier_name(tier)) + " exhausted after " +
                                  std::to_string(slot) + " prompts");
        size_t pick = size_t(rng.below(rem.size()));
        int tmpl_idx = rem[pick];
        rem.erase(rem.begin() + long(pick));
        std::string text = TemplateBank::instantiate(bank.cell(task, tier)[size_t(tmpl_idx)], cls);
        group.prompts.push_back({text, tier});
    }

    for (size_t i = 0; i < group.prompts.size(); ++i)
        for (size_t j = i + 1; j < group.prompts.size(); ++j)
            if (group.prompts[i].text == group.prompts[j].text)
                throw ValidationError("template bank produced duplicate prompt text: '" +
                                      group.prompts[i].text + "'");
    return group;
}

PromptGroup shuffle_group(const PromptGroup& group, uint64_t seed) {
    PromptGroup out = group;
    Rng rng(seed);
    for (size_t i = out.prompts.size(); i > 1; --i) {
        size_t j = size_t(rng.below(i));
        std::swap(out.prompts[i - 1], out.prompts[j]);
    }
    return out;
}

}  // namespace pgat
