#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchforge/harness/harness.hpp"
#include "patchforge/model/train.hpp"

namespace patchforge::harness {

// Everything a run reads from --config. Every section is optional; missing
// keys keep their defaults. Unknown top-level sections are rejected so a typo
// does not silently run the defaults.
struct RunConfig {
    DataSpec data;
    model::TrainConfig train;
    std::string model_path;  // empty: <out-dir>/model.pfm
    AttackOptConfig attack;
    std::vector<int> targets;  // empty: every class
    std::size_t eval_images = 256;
    std::size_t samples_per_image = 1;
    ScaleOptions scale;
    RotationOptions rotation;
    LocationOptions location;
    TransparencyOptions transparency;
    transparency::TransparentConfig transparent;
    std::size_t control_iterations = 500;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);

    PlanCommon common() const;
};

nlohmann::json train_config_json(const model::TrainConfig& c);
model::TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace patchforge::harness
