#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pgat {

// T1 segments every nucleus; T2 segments one category.
enum class Task { AllNuclei, CategorySpecific };

enum class Tier { Low, Medium, High };

const char* task_name(Task t);
const char* tier_name(Tier t);
Task task_from_name(const std::string& s);
Tier tier_from_name(const std::string& s);

inline constexpr std::array<const char*, 3> kClassNames = {"epithelial-like", "inflammatory-like",
                                                           "stromal-like"};
inline constexpr int kNumClasses = 3;

struct Prompt {
    std::string text;
    Tier tier = Tier::Low;
    bool operator==(const Prompt&) const = default;
};

// One image target with K prompts sharing a single ground-truth mask.
struct PromptGroup {
    std::string image_id;
    Task task = Task::AllNuclei;
    int class_id = -1;  // valid iff task == CategorySpecific
    std::vector<Prompt> prompts;
    std::string mask_id;

    int size() const { return int(prompts.size()); }
    bool operator==(const PromptGroup&) const = default;
};

struct TierPolicy {
    enum class Kind { SingleTier, Mixed };
    Kind kind = Kind::Mixed;
    Tier tier = Tier::Low;  // used by SingleTier

    static TierPolicy mixed() { return {Kind::Mixed, Tier::Low}; }
    static TierPolicy single(Tier t) { return {Kind::SingleTier, t}; }
};

// Fill-in templates per (task, tier); "{class}" is the category slot for T2.
// Word-count rules: low-tier instantiations have at most 3 words, high-tier
// ones at least 8 plus a spatial or exclusion cue.
class TemplateBank {
public:
    static TemplateBank builtin();
    static TemplateBank from_json_text(const std::string& text);
    static TemplateBank from_file(const std::string& path);
    std::string to_json_text() const;

    const std::vector<std::string>& cell(Task task, Tier tier) const;
    void set_cell(Task task, Tier tier, std::vector<std::string> templates);

    // enforces the bank invariants; throws ValidationError on violation
    void validate() const;

    static std::string instantiate(const std::string& tmpl, const std::string& class_name);
    static int word_count(const std::string& text);

private:
    std::map<std::pair<int, int>, std::vector<std::string>> cells_;
};

std::string mask_id_for(const std::string& scene_id, Task task, int class_id);

// K distinct prompts drawn per tier policy; deterministic given seed.
PromptGroup build_prompt_group(const TemplateBank& bank, const std::string& scene_id, Task task,
                               std::optional<int> class_id, int k, TierPolicy policy, uint64_t seed);

// Uniform permutation of the prompt list (Fisher-Yates); all other fields
// unchanged. The post-shuffle first prompt is the consistency reference.
PromptGroup shuffle_group(const PromptGroup& group, uint64_t seed);

}  // namespace pgat
