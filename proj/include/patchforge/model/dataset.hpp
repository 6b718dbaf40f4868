#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patchforge/diff/tensor.hpp"

namespace patchforge::model {

enum class Split { train, test, all };

struct Dataset {
    diff::Tensor<float> images;   // N x 3 x H x W, pixels in [0,1]
    std::vector<int> labels;      // N entries in [0, num_classes)
    std::vector<std::size_t> ids; // provenance index in the source collection
    std::size_t num_classes = 10;
    Split split = Split::all;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }

    // 1 x C x H x W copy of one sample.
    diff::Tensor<float> image(std::size_t i) const;
    // Copies the listed samples into an N x C x H x W batch.
    diff::Tensor<float> gather(std::span<const std::size_t> indices) const;
    Dataset subset(std::span<const std::size_t> indices) const;

    // Indices of samples whose label differs from `label`.
    std::vector<std::size_t> indices_excluding(int label) const;

    // Throws on shape/label/pixel-range violations.
    void validate() const;
};

struct SyntheticConfig {
    std::uint64_t seed = 7;
    std::size_t count = 1000;
    std::size_t num_classes = 10;
    std::size_t image_size = 32;

    nlohmann::json to_json() const;
    static SyntheticConfig from_json(const nlohmann::json& j);
};

// Parametric colored shapes (disk, square, triangle, plus, ring, bars, diamond,
// diagonal cross, frame) on textured backgrounds. Labels cycle through the
// classes so every prefix is close to balanced.
Dataset synthetic_shapes(const SyntheticConfig& config);

// First n_train samples become the train split, the rest the test split.
std::pair<Dataset, Dataset> split_train_test(const Dataset& all, std::size_t n_train);

enum class DatasetFormat { idx, png_dir, synthetic };

DatasetFormat parse_dataset_format(const std::string& name);

struct IngestOptions {
    std::size_t num_classes = 10;
    std::size_t image_size = 32;
};

// idx:       directory holding images.idx (u8, N x C x H x W or N x H x W) and labels.idx (u8, N)
// png_dir:   directory with one integer-named subdirectory per class
// synthetic: JSON file with a SyntheticConfig
Dataset ingest_dataset(const std::filesystem::path& path, DatasetFormat format, const IngestOptions& options = {});

// Writes images.idx / labels.idx under `dir` (pixels quantized to 8 bits).
void write_idx(const std::filesystem::path& dir, const Dataset& data);

}  // namespace patchforge::model
