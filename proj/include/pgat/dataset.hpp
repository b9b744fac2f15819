#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pgat/prompts.hpp"
#include "pgat/synth.hpp"

namespace pgat {

struct StoredScene {
    std::string id;
    int height = 0;
    int width = 0;
    uint64_t seed = 0;
    std::vector<uint8_t> image;                         // gray 0..255, H*W
    std::map<std::string, std::vector<uint8_t>> masks;  // "t1", "t2c0".. -> {0,1} H*W

    bool operator==(const StoredScene&) const = default;
};

struct Dataset {
    int format = 1;
    uint64_t seed = 0;
    std::string generator_json;  // provenance: generation parameters as JSON text
    std::vector<StoredScene> scenes;
    std::vector<PromptGroup> groups;

    const StoredScene& scene(const std::string& id) const;
    // resolve "<scene>:t1" / "<scene>:t2c<k>" to its mask buffer
    const std::vector<uint8_t>& mask(const std::string& mask_id) const;

    bool operator==(const Dataset&) const = default;
};

// How groups are attached to generated scenes.
//   train: one mixed-tier T1 group and one mixed-tier T2 group per scene
//   eval:  per tier, one single-tier T1 and one single-tier T2 group per
//          scene (K=2); the T2 class is fixed per scene across tiers
enum class GroupMode { Train, Eval };

struct DatasetGenSpec {
    SceneSpec base;  // n_blobs field is overridden per scene from the range below
    int n_blobs_min = 4;
    int n_blobs_max = 10;
    int k_prompts = 3;
    GroupMode group_mode = GroupMode::Train;
};

Dataset generate_dataset(const DatasetGenSpec& spec, int n_scenes, uint64_t seed,
                         const TemplateBank& bank);

std::string dataset_gen_spec_to_json(const DatasetGenSpec& spec);
DatasetGenSpec dataset_gen_spec_from_json(const std::string& text);
DatasetGenSpec dataset_gen_spec_from_file(const std::string& path);

// shift the per-scene template and the blob count range together
DatasetGenSpec apply_shift(const DatasetGenSpec& spec, const DomainShiftSpec& shift);

// Images and masks as binary PGM (P5, maxval 255; masks use {0,255}),
// plus manifest.json with per-file SHA-256 checksums. Round-trip is
// lossless: read_dataset(write_dataset(d)) == d.
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

// PGM helpers (exposed for tests)
void write_pgm(const std::string& path, int height, int width, const std::vector<uint8_t>& gray);
std::vector<uint8_t> read_pgm(const std::string& path, int& height, int& width);

}  // namespace pgat
