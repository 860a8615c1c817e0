#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "noise2map/common.hpp"
#include "noise2map/objectives.hpp"
#include "noise2map/png_io.hpp"
#include "noise2map/tensor.hpp"

namespace n2m {

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

// One training example. SS carries a single image, CD an ordered (pre, post)
// pair; images are [C, H, W] floats in [-1, 1].
struct Sample {
    Task task = Task::SS;
    std::vector<Tensor<float>> images;
    Tensor<int> mask;  // [H, W] class indices
    std::string id;

    // Model input: the image itself (SS) or the channel-concatenated pair (CD).
    Tensor<float> model_input() const;
};

struct ManifestEntry {
    std::vector<std::filesystem::path> image_paths;
    std::filesystem::path mask_path;
    std::string id;
};

struct DatasetManifest {
    std::filesystem::path root;
    Task task = Task::SS;
    std::vector<ManifestEntry> entries;
    int num_classes = 2;
    ClassWeights class_weights = ClassWeights::uniform(2);
    Split split = Split::Train;

    std::size_t size() const { return entries.size(); }
};

// v -> v/127.5 - 1, elementwise; rejects values outside [0, 255].
Tensor<float> normalize(const Tensor<int>& image8);
Tensor<float> normalize(const ImageU8& image);

// Inverse map back onto the 8-bit grid (clamped, round-to-nearest).
ImageU8 denormalize(const Tensor<float>& image);

// Directory layout:
//   SS: root/images/{id}.png, root/masks/{id}.png
//   CD: root/A/{id}.png, root/B/{id}.png, root/masks/{id}.png
//   splits: root/splits/{train|val|test}.txt, one id per line
DatasetManifest load_manifest(const std::filesystem::path& root, Task task, Split split,
                              int num_classes = 2,
                              const ClassWeights& weights = ClassWeights::uniform(2));

// Image-only corpus for self-supervised pretraining: root/images/{id}.png and
// the split files, no masks required (present masks are simply ignored).
DatasetManifest load_image_corpus(const std::filesystem::path& root, Split split);

Sample load_sample(const DatasetManifest& manifest, std::size_t index);

// Non-overlapping grid tiling with a final edge-aligned tile when the image
// size is not a multiple of the target; row-major order.
std::vector<Tensor<float>> center_crop_or_tile(const Tensor<float>& image, int target);

struct SynthSpec {
    std::uint64_t seed = 0;
    int size = 64;  // H == W
    int min_buildings = 2;
    int max_buildings = 5;
    double change_fraction = 0.3;
    int n_samples = 16;
    double val_fraction = 0.0;
    double test_fraction = 0.0;

    void validate() const {
        if (size < 16) throw ParamError("synthetic size must be >= 16");
        if (min_buildings < 1 || max_buildings < min_buildings)
            throw ParamError("invalid building count range");
        if (change_fraction < 0.0 || change_fraction > 1.0)
            throw ParamError("change_fraction must be in [0, 1]");
        if (n_samples < 1) throw ParamError("n_samples must be >= 1");
        if (val_fraction < 0.0 || test_fraction < 0.0 ||
            val_fraction + test_fraction >= 1.0)
            throw ParamError("split fractions must be non-negative and sum below 1");
    }
};

// Writes a synthetic corpus for one task under out_root and returns the
// manifest of its train split. Scenes are shared between tasks: generating
// SS and CD from the same spec produces the same underlying geometry.
DatasetManifest generate_synthetic(const SynthSpec& spec,
                                   const std::filesystem::path& out_root, Task task);

}  // namespace n2m
