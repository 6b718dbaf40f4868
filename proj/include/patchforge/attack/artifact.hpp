#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchforge/attack/patch_attack.hpp"
#include "patchforge/io/files.hpp"

namespace patchforge::attack {

inline constexpr int kPatchSchemaVersion = 1;

// C x H x W in [0,1] -> interleaved 8-bit image (1 or 3 channels).
io::Image8 to_image8(const Tensor<float>& chw);

nlohmann::json tensor_to_json(const Tensor<float>& t);
Tensor<float> tensor_from_json(const nlohmann::json& j);

nlohmann::json patch_sidecar(const Patch& patch);
Patch patch_from_sidecar(const nlohmann::json& j);

// Writes <stem>.png and <stem>.json; returns both paths. The sidecar keeps
// the exact float pixels, so loading it restores the patch bit for bit.
std::vector<std::filesystem::path> save_patch(const std::filesystem::path& stem, const Patch& patch);
Patch load_patch(const std::filesystem::path& sidecar);

}  // namespace patchforge::attack
