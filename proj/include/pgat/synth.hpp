#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pgat/prompts.hpp"

namespace pgat {

// Parametric description of one synthetic grayscale nuclei image.
struct SceneSpec {
    int height = 32;
    int width = 32;
    int n_blobs = 6;
    std::array<double, 3> class_mix = {0.5, 0.3, 0.2};
    double radius_min = 3.0;
    double radius_max = 6.0;
    std::array<double, 3> class_intensity = {0.30, 0.55, 0.80};
    double texture_noise_sigma = 0.05;
    double background_level = 0.08;
    bool overlap_allowed = true;
    uint64_t seed = 0;

    void validate() const;
    bool operator==(const SceneSpec&) const = default;
};

// Multiplicative deltas on blob count, radius range and noise, plus an
// additive background lift used by the heavy-noise preset.
struct DomainShiftSpec {
    double blob_count_scale = 1.0;
    double radius_scale = 1.0;
    double noise_scale = 1.0;
    double background_scale = 1.0;
    double background_offset = 0.0;

    static DomainShiftSpec identity() { return {}; }
    static DomainShiftSpec preset(const std::string& name);
    static const std::vector<std::string>& preset_names();
};

struct SceneData {
    int height = 0;
    int width = 0;
    std::vector<double> image;                        // H*W in [0,1]
    std::vector<std::vector<uint8_t>> instance_masks; // each H*W in {0,1}
    std::vector<int> instance_classes;                // class per instance
};

// Filled ellipses with per-class intensity plus Gaussian texture noise,
// clipped to [0,1]. Deterministic given spec.seed. Blobs are placed fully
// inside the frame; with overlap disallowed, placement retries up to 1000
// times per blob before rejecting the spec.
SceneData generate_scene(const SceneSpec& spec);

// T1: union over all instances; T2: union over instances of class_id
// (possibly empty). class_id present iff task == CategorySpecific.
std::vector<uint8_t> target_mask(const SceneData& scene, Task task, std::optional<int> class_id);

// Scale and re-clip the spec fields; the seed is replaced by a derived seed.
// A shift that produces an invalid spec is rejected.
SceneSpec apply_shift(const SceneSpec& spec, const DomainShiftSpec& shift);

}  // namespace pgat
