#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "patchforge/model/network.hpp"

namespace patchforge::model {

inline constexpr std::uint32_t kModelFormatVersion = 1;

// Binary container at `path`:
//   "PFMODEL\0" | u32 version | u32 tensor count | per tensor: u32 rank, u32 dims...
//   | float32 values of every tensor in order | u32 CRC-32 of all preceding bytes
// All integers and floats little-endian. Architecture and training metadata go
// to the JSON sidecar `path` + ".json".
std::vector<std::uint8_t> encode_model(const Network<float>& net);
void save_model(const Network<float>& net, const std::filesystem::path& path);
Network<float> load_model(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace patchforge::model
