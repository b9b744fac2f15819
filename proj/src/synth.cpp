#include "pgat/synth.hpp"

#include <algorithm>
#include <cmath>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"

namespace pgat {

void SceneSpec::validate() const {
    if (height < 16 || width < 16)
        throw ValidationError("scene must be at least 16x16, got " + std::to_string(height) + "x" +
                              std::to_string(width));
    if (n_blobs < 0) throw ValidationError("negative blob count");
    double mix = class_mix[0] + class_mix[1] + class_mix[2];
    if (std::abs(mix - 1.0) > 1e-9)
        throw ValidationError("class mix must sum to 1, got " + std::to_string(mix));
    for (double p : class_mix)
        if (p < 0.0) throw ValidationError("class mix entries must be non-negative");
    if (radius_min < 2.0) throw ValidationError("minimum radius must be at least 2 pixels");
    if (radius_max < radius_min) throw ValidationError("radius range is inverted");
    if (2.0 * (radius_max + 1.0) > double(std::min(height, width)))
        throw ValidationError("maximum radius " + std::to_string(radius_max) +
                              " cannot fit inside a " + std::to_string(height) + "x" +
                              std::to_string(width) + " frame");
    for (double v : class_intensity)
        if (v < 0.0 || v > 1.0) throw ValidationError("class intensity out of [0,1]");
    if (background_level < 0.0 || background_level > 1.0)
        throw ValidationError("background level out of [0,1]");
    if (texture_noise_sigma < 0.0) throw ValidationError("negative noise sigma");
}

const std::vector<std::string>& DomainShiftSpec::preset_names() {
    static const std::vector<std::string> names = {"density", "size", "noise"};
    return names;
}

DomainShiftSpec DomainShiftSpec::preset(const std::string& name) {
    DomainShiftSpec s;
    if (name == "density") {
        s.blob_count_scale = 2.0;
    } else if (name == "size") {
        s.radius_scale = 1.8;
    } else if (name == "noise") {
        s.noise_scale = 3.0;
        s.background_offset = 0.15;
    } else {
        throw ValidationError("unknown domain-shift preset '" + name +
                              "' (known: density, size, noise)");
    }
    return s;
}

namespace {

int pick_class(Rng& rng, const std::array<double, 3>& mix) {
    double u = rng.uniform01();
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) {
        acc += mix[size_t(c)];
        if (u < acc) return c;
    }
    return 2;
}

struct Blob {
    double cx, cy, rx, ry, angle;
    int cls;
};

std::vector<uint8_t> rasterize(const Blob& b, int h, int w) {
    std::vector<uint8_t> mask(size_t(h) * w, 0);
    double ca = std::cos(b.angle), sa = std::sin(b.angle);
    double rmax = std::max(b.rx, b.ry);
    int y0 = std::max(0, int(std::floor(b.cy - rmax)));
    int y1 = std::min(h - 1, int(std::ceil(b.cy + rmax)));
    int x0 = std::max(0, int(std::floor(b.cx - rmax)));
    int x1 = std::min(w - 1, int(std::ceil(b.cx + rmax)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double dx = x - b.cx, dy = y - b.cy;
            double u = (dx * ca + dy * sa) / b.rx;
            double v = (-dx * sa + dy * ca) / b.ry;
            if (u * u + v * v <= 1.0) mask[size_t(y) * w + x] = 1;
        }
    }
    return mask;
}

}  // namespace

SceneData generate_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    int h = spec.height, w = spec.width;

    SceneData out;
    out.height = h;
    out.width = w;
    out.image.resize(size_t(h) * w);
    for (auto& px : out.image)
        px = std::clamp(spec.background_level + spec.texture_noise_sigma * rng.normal(), 0.0, 1.0);

    std::vector<uint8_t> occupied(size_t(h) * w, 0);
    for (int bi = 0; bi < spec.n_blobs; ++bi) {
        Blob blob;
        std::vector<uint8_t> mask;
        bool placed = false;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            blob.cls = pick_class(rng, spec.class_mix);
            blob.rx = rng.uniform(spec.radius_min, spec.radius_max);
            blob.ry = rng.uniform(spec.radius_min, spec.radius_max);
            blob.angle = rng.uniform(0.0, 3.14159265358979323846);
            double margin = std::ceil(std::max(blob.rx, blob.ry)) + 1.0;
            blob.cx = rng.uniform(margin, double(w - 1) - margin);
            blob.cy = rng.uniform(margin, double(h - 1) - margin);
            mask = rasterize(blob, h, w);
            if (spec.overlap_allowed) {
                placed = true;
                break;
            }
            bool clash = false;
            for (size_t p = 0; p < mask.size(); ++p)
                if (mask[p] && occupied[p]) {
                    clash = true;
                    break;
                }
            if (!clash) {
                placed = true;
                break;
            }
        }
        if (!placed)
            throw ValidationError("could not place blob " + std::to_string(bi) +
                                  " without overlap after 1000 attempts");
        for (size_t p = 0; p < mask.size(); ++p)
            if (mask[p]) {
                occupied[p] = 1;
                out.image[p] = std::clamp(
                    spec.class_intensity[size_t(blob.cls)] + spec.texture_noise_sigma * rng.normal(),
                    0.0, 1.0);
            }
        out.instance_masks.push_back(std::move(mask));
        out.instance_classes.push_back(blob.cls);
    }
    return out;
}

std::vector<uint8_t> target_mask(const SceneData& scene, Task task, std::optional<int> class_id) {
    if (task == Task::CategorySpecific) {
        if (!class_id) throw ValidationError("category-specific target requires a class id");
        if (*class_id < 0 || *class_id >= kNumClasses)
            throw ValidationError("unknown class id: " + std::to_string(*class_id));
    } else if (class_id) {
        throw ValidationError("all-nuclei target must not carry a class id");
    }
    std::vector<uint8_t> mask(size_t(scene.height) * scene.width, 0);
    for (size_t i = 0; i < scene.instance_masks.size(); ++i) {
        if (task == Task::CategorySpecific && scene.instance_classes[i] != *class_id) continue;
        const auto& m = scene.instance_masks[i];
        for (size_t p = 0; p < mask.size(); ++p) mask[p] |= m[p];
    }
    return mask;
}

SceneSpec apply_shift(const SceneSpec& spec, const DomainShiftSpec& shift) {
    SceneSpec out = spec;
    out.n_blobs = int(std::lround(double(spec.n_blobs) * shift.blob_count_scale));
    out.radius_min = spec.radius_min * shift.radius_scale;
    out.radius_max = spec.radius_max * shift.radius_scale;
    out.texture_noise_sigma = spec.texture_noise_sigma * shift.noise_scale;
    out.background_level =
        std::clamp(spec.background_level * shift.background_scale + shift.background_offset, 0.0, 1.0);
    out.seed = mix_seed(spec.seed, "domain-shift");
    try {
        out.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("shift produces an invalid scene spec: ") + e.what());
    }
    return out;
}

}  // namespace pgat
