#include "patchforge/attack/artifact.hpp"

#include <algorithm>
#include <cmath>

#include "patchforge/error.hpp"

namespace patchforge::attack {

namespace fs = std::filesystem;

io::Image8 to_image8(const Tensor<float>& chw) {
    if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3))
        throw ShapeError("to_image8 expects 1 or 3 channels, got " + diff::shape_str(chw.shape()));
    io::Image8 img;
    img.channels = chw.dim(0);
    img.height = chw.dim(1);
    img.width = chw.dim(2);
    img.pixels.resize(img.channels * img.height * img.width);
    const std::size_t plane = img.height * img.width;
    for (std::size_t q = 0; q < plane; ++q)
        for (std::size_t c = 0; c < img.channels; ++c) {
            const double v = std::clamp(static_cast<double>(chw[c * plane + q]), 0.0, 1.0);
            img.pixels[q * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

nlohmann::json tensor_to_json(const Tensor<float>& t) {
    return {{"shape", t.shape()}, {"values", std::vector<float>(t.values().begin(), t.values().end())}};
}

Tensor<float> tensor_from_json(const nlohmann::json& j) {
    try {
        return Tensor<float>(j.at("shape").get<diff::Shape>(), j.at("values").get<std::vector<float>>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("tensor: ") + e.what());
    }
}

nlohmann::json patch_sidecar(const Patch& p) {
    return {{"schema", "patchforge.patch"},
            {"schema_version", kPatchSchemaVersion},
            {"toolkit_version", PATCHFORGE_VERSION},
            {"target", p.target},
            {"seed", p.config.seed},
            {"support", p.config.support.to_json()},
            {"config", p.config.to_json()},
            {"improved", p.improved},
            {"loss_curve", p.loss_curve},
            {"pixels", tensor_to_json(p.pixels)}};
}

Patch patch_from_sidecar(const nlohmann::json& j) {
    if (j.value("schema", std::string()) != "patchforge.patch") throw FormatError("not a patch sidecar");
    const int v = j.value("schema_version", 0);
    if (v != kPatchSchemaVersion)
        throw VersionError("patch sidecar schema version " + std::to_string(v) + ", expected " +
                           std::to_string(kPatchSchemaVersion));
    Patch p;
    try {
        p.target = j.at("target").get<int>();
        p.config = AttackOptConfig::from_json(j.at("config"));
        p.improved = j.value("improved", true);
        p.loss_curve = j.value("loss_curve", std::vector<double>{});
        p.pixels = tensor_from_json(j.at("pixels"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("patch sidecar: ") + e.what());
    }
    return p;
}

std::vector<fs::path> save_patch(const fs::path& stem, const Patch& patch) {
    fs::path png = stem, json = stem;
    png += ".png";
    json += ".json";
    io::write_atomic(png, io::encode_png(to_image8(patch.pixels)));
    io::write_atomic(json, patch_sidecar(patch).dump(2) + "\n");
    return {png, json};
}

Patch load_patch(const fs::path& sidecar) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(sidecar));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(sidecar.string() + ": " + e.what());
    }
    return patch_from_sidecar(j);
}

}  // namespace patchforge::attack
