#include "patchforge/harness/config.hpp"

#include <set>

#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"

namespace patchforge::harness {

nlohmann::json train_config_json(const model::TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"momentum", c.momentum},
            {"seed", c.seed}};
}

model::TrainConfig train_config_from_json(const nlohmann::json& j) {
    model::TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    if (j.contains("checkpoint")) c.checkpoint = j.at("checkpoint").get<std::string>();
    c.validate();
    return c;
}

nlohmann::json RunConfig::to_json() const {
    auto tr = transparent.to_json();
    tr["control_iterations"] = control_iterations;
    tr["scale_lo"] = transparency.scale_lo;
    tr["scale_hi"] = transparency.scale_hi;
    return {{"data", data.to_json()},
            {"train", train_config_json(train)},
            {"model", {{"path", model_path}}},
            {"attack", attack.to_json()},
            {"eval", {{"targets", targets}, {"eval_images", eval_images}, {"samples_per_image", samples_per_image}}},
            {"scale",
             {{"pivots", scale.pivots},
              {"s_min", scale.s_min},
              {"s_max", scale.s_max},
              {"bins", scale.bins},
              {"samples_per_image", scale.samples_per_image}}},
            {"rotation",
             {{"theta_max", rotation.theta_max},
              {"scale", rotation.scale},
              {"bins", rotation.bins},
              {"samples_per_image", rotation.samples_per_image}}},
            {"location",
             {{"scale_lo", location.scale_lo},
              {"scale_hi", location.scale_hi},
              {"samples_per_image", location.samples_per_image}}},
            {"transparency", tr},
            {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const std::set<std::string> known = {"data",     "train",    "model",        "attack", "eval",
                                                "scale",    "rotation", "location",     "transparency", "seed"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("unknown config section '" + k + "'");
    RunConfig c;
    try {
        if (j.contains("data")) c.data = DataSpec::from_json(j.at("data"));
        if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
        if (j.contains("model")) c.model_path = j.at("model").value("path", std::string());
        if (j.contains("attack")) c.attack = AttackOptConfig::from_json(j.at("attack"));
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            c.targets = e.value("targets", c.targets);
            c.eval_images = e.value("eval_images", c.eval_images);
            c.samples_per_image = e.value("samples_per_image", c.samples_per_image);
        }
        if (j.contains("scale")) {
            const auto& s = j.at("scale");
            c.scale.pivots = s.value("pivots", c.scale.pivots);
            c.scale.s_min = s.value("s_min", c.scale.s_min);
            c.scale.s_max = s.value("s_max", c.scale.s_max);
            c.scale.bins = s.value("bins", c.scale.bins);
            c.scale.samples_per_image = s.value("samples_per_image", c.scale.samples_per_image);
        }
        if (j.contains("rotation")) {
            const auto& r = j.at("rotation");
            c.rotation.theta_max = r.value("theta_max", c.rotation.theta_max);
            c.rotation.scale = r.value("scale", c.rotation.scale);
            c.rotation.bins = r.value("bins", c.rotation.bins);
            c.rotation.samples_per_image = r.value("samples_per_image", c.rotation.samples_per_image);
        }
        if (j.contains("location")) {
            const auto& l = j.at("location");
            c.location.scale_lo = l.value("scale_lo", c.location.scale_lo);
            c.location.scale_hi = l.value("scale_hi", c.location.scale_hi);
            c.location.samples_per_image = l.value("samples_per_image", c.location.samples_per_image);
        }
        if (j.contains("transparency")) {
            const auto& t = j.at("transparency");
            c.transparent = transparency::TransparentConfig::from_json(t);
            c.control_iterations = t.value("control_iterations", c.control_iterations);
            c.transparency.scale_lo = t.value("scale_lo", c.transparency.scale_lo);
            c.transparency.scale_hi = t.value("scale_hi", c.transparency.scale_hi);
        }
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (c.eval_images == 0 || c.samples_per_image == 0) throw ConfigError("eval_images and samples_per_image must be positive");
    if (c.scale.bins == 0 || c.rotation.bins == 0) throw ConfigError("bin counts must be positive");
    if (c.control_iterations == 0) throw ConfigError("control_iterations must be positive");
    for (int t : c.targets)
        if (t < 0 || static_cast<std::size_t>(t) >= c.data.synthetic.num_classes)
            throw ConfigError("target " + std::to_string(t) + " out of range");
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::string text;
    try {
        text = io::read_text(path);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    try {
        return from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

PlanCommon RunConfig::common() const {
    PlanCommon c;
    c.targets = targets;
    if (c.targets.empty())
        for (std::size_t k = 0; k < data.synthetic.num_classes; ++k) c.targets.push_back(static_cast<int>(k));
    c.eval_images = eval_images;
    c.seed = seed;
    c.model_ref = model_path;
    c.attack = attack;
    return c;
}

}  // namespace patchforge::harness
