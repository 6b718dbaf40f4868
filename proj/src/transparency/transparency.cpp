#include "patchforge/transparency/transparency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "patchforge/diff/ops.hpp"
#include "patchforge/attack/artifact.hpp"
#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"

namespace patchforge::transparency {

namespace {

constexpr double kClampBand = 0.05;

template <typename S>
double mean_of(const Tensor<S>& m) {
    if (m.size() == 0) throw ShapeError("empty mask");
    double s = 0.0;
    for (S v : m.values()) s += static_cast<double>(v);
    return s / static_cast<double>(m.size());
}

}  // namespace

double patch_obtrusiveness(const Tensor<float>& mask) { return mean_of(mask); }
double patch_obtrusiveness(const Tensor<double>& mask) { return mean_of(mask); }

template <typename S>
Var<S> obtrusiveness(const Var<S>& mask) {
    return diff::mean(mask);
}

template <typename S>
Var<S> blend_apply(const Var<S>& image, const Var<S>& patch, const Var<S>& mask,
                   std::span<const geometry::TransformSpec> specs) {
    const auto& is = image.shape();
    const auto& ps = patch.shape();
    const auto& ms = mask.shape();
    if (is.size() != 4 || is[0] != specs.size())
        throw ShapeError("blend_apply: need one spec per image, image shape " + diff::shape_str(is));
    if (ps.size() != 3 || ps[0] != is[1]) throw ShapeError("blend_apply: patch channels do not match image");
    if (ms.size() != 3 || ms[0] != 1 || ms[1] != ps[1] || ms[2] != ps[2])
        throw ShapeError("blend_apply: mask " + diff::shape_str(ms) + " does not match patch " + diff::shape_str(ps));
    auto wp = geometry::warp_patch(patch, specs, is[2], is[3]);
    auto wm = geometry::warp_patch(mask, specs, is[2], is[3]);
    return diff::lerp(image, wp.canvas, wm.canvas);
}

template <typename S>
JointLoss<S> joint_loss(const model::Network<S>& net, const Var<S>& attacked, int target, const Var<S>& mask,
                        double gamma) {
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    std::vector<int> targets(attacked.shape().at(0), target);
    JointLoss<S> l;
    l.target = diff::softmax_cross_entropy(net.forward(attacked), targets);
    l.po = diff::square(obtrusiveness(mask));
    l.total = diff::add(l.target, diff::scale(l.po, static_cast<S>(gamma)));
    return l;
}

template <typename S>
JointLoss<S> transparent_loss(const model::Network<S>& net, const Var<S>& patch, const Var<S>& mask,
                              const EotBatch<S>& batch, int target, double gamma) {
    auto& g = patch.graph();
    auto x = g.leaf(batch.images);
    auto p = diff::clamp_st(patch, S(0), S(1), S(kClampBand));
    auto m = diff::clamp_st(mask, S(0), S(1), S(kClampBand));
    return joint_loss(net, blend_apply(x, p, m, batch.specs), target, m, gamma);
}

#define PF_INSTANTIATE(S)                                                                                        \
    template Var<S> obtrusiveness(const Var<S>&);                                                                \
    template Var<S> blend_apply(const Var<S>&, const Var<S>&, const Var<S>&, std::span<const geometry::TransformSpec>); \
    template JointLoss<S> joint_loss(const model::Network<S>&, const Var<S>&, int, const Var<S>&, double);      \
    template JointLoss<S> transparent_loss(const model::Network<S>&, const Var<S>&, const Var<S>&,             \
                                           const EotBatch<S>&, int, double);
PF_INSTANTIATE(float)
PF_INSTANTIATE(double)
#undef PF_INSTANTIATE

// ---------------------------------------------------------------- gamma

GammaSchedule GammaSchedule::make(double initial, double decay, double floor, double threshold,
                                  std::size_t patience) {
    GammaSchedule s;
    s.initial = initial;
    s.gamma = initial;
    s.decay = decay;
    s.floor = floor;
    s.threshold = threshold;
    s.patience = patience;
    s.validate();
    return s;
}

void GammaSchedule::validate() const {
    if (!(initial >= 0.0) || !std::isfinite(initial)) throw ConfigError("gamma initial must be finite and >= 0");
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("gamma decay must lie in (0, 1)");
    if (!(floor >= 0.0)) throw ConfigError("gamma floor must be >= 0");
    if (!(threshold > 0.0)) throw ConfigError("loss threshold must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
}

nlohmann::json GammaSchedule::to_json() const {
    return {{"initial", initial}, {"decay", decay},  {"floor", floor},  {"threshold", threshold},
            {"patience", patience}, {"gamma", gamma}, {"stage", stage}, {"counter", counter}};
}

GammaSchedule GammaSchedule::from_json(const nlohmann::json& j) {
    GammaSchedule s;
    try {
        s.initial = j.value("initial", s.initial);
        s.decay = j.value("decay", s.decay);
        s.floor = j.value("floor", s.floor);
        s.threshold = j.value("threshold", s.threshold);
        s.patience = j.value("patience", s.patience);
        s.gamma = j.value("gamma", s.initial);
        s.stage = j.value("stage", std::size_t{0});
        s.counter = j.value("counter", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("gamma schedule: ") + e.what());
    }
    s.validate();
    return s;
}

bool gamma_step(GammaSchedule& s, double target_loss) {
    if (target_loss < s.threshold) {
        ++s.counter;
    } else {
        s.counter = 0;
    }
    if (s.counter < s.patience) return false;
    s.counter = 0;
    const double next = std::max(s.gamma * s.decay, s.floor);
    if (!(next < s.gamma)) return false;
    s.gamma = next;
    ++s.stage;
    return true;
}

// ---------------------------------------------------------------- joint optimization

TransparentConfig::TransparentConfig() { attack.iterations = 1200; }

void TransparentConfig::validate() const {
    attack.validate();
    schedule.validate();
    if (!(mask_init >= 0.0 && mask_init <= 1.0)) throw ConfigError("mask_init must lie in [0,1]");
}

nlohmann::json TransparentConfig::to_json() const {
    return {{"attack", attack.to_json()}, {"schedule", schedule.to_json()}, {"mask_init", mask_init}};
}

TransparentConfig TransparentConfig::from_json(const nlohmann::json& j) {
    TransparentConfig c;
    if (j.contains("attack")) {
        auto a = j.at("attack");
        if (!a.contains("iterations")) a["iterations"] = c.attack.iterations;
        c.attack = AttackOptConfig::from_json(a);
    }
    if (j.contains("schedule")) c.schedule = GammaSchedule::from_json(j.at("schedule"));
    c.mask_init = j.value("mask_init", c.mask_init);
    c.validate();
    return c;
}

TransparentResult optimize_transparent(const model::Network<float>& net, const attack::ImagePool& pool, int target,
                                       const TransparentConfig& config) {
    config.validate();
    const auto& ac = config.attack;
    if (target < 0 || static_cast<std::size_t>(target) >= net.num_classes())
        throw ConfigError("target " + std::to_string(target) + " out of range");
    Rng rng(ac.seed);
    Rng init_rng = rng.fork(0);
    Rng batch_rng = rng.fork(1);

    TransparentResult r;
    r.patch.target = target;
    r.patch.config = ac;
    r.patch.pixels =
        attack::initialize_patch(net.architecture().channels, ac.patch_edge, ac.init_lo, ac.init_hi, init_rng);
    r.mask = Tensor<float>(diff::Shape{1, ac.patch_edge, ac.patch_edge}, static_cast<float>(config.mask_init));
    GammaSchedule schedule = config.schedule;
    schedule.gamma = schedule.initial;
    schedule.stage = 0;
    schedule.counter = 0;

    for (std::size_t it = 0; it < ac.iterations; ++it) {
        const auto batch =
            attack::draw_batch(pool, ac.support, ac.images_per_step, ac.transforms_per_image, batch_rng);
        diff::Graph<float> g;
        auto p = g.leaf(r.patch.pixels, true);
        auto m = g.leaf(r.mask, true);
        JointLoss<float> l;
        try {
            l = transparent_loss(net, p, m, batch, target, schedule.gamma);
        } catch (const NumericError& e) {
            std::ostringstream os;
            os << "joint loss is not finite at iteration " << it << " (lr " << ac.learning_rate << ", gamma "
               << schedule.gamma << "): " << e.what();
            throw NumericError(os.str());
        }
        const double lt = l.target.value().item();
        r.target_trace.push_back(lt);
        r.po_trace.push_back(l.po.value().item());
        r.gamma_trace.push_back(schedule.gamma);
        r.patch.loss_curve.push_back(l.total.value().item());
        g.backward(l.total);
        const auto gp = p.grad();
        const auto gm = m.grad();
        if (!gp.all_finite() || !gm.all_finite()) {
            std::ostringstream os;
            os << "joint gradient is not finite at iteration " << it << " (lr " << ac.learning_rate << ")";
            throw NumericError(os.str());
        }
        attack::apply_step(r.patch.pixels, gp, ac.learning_rate, ac.step_rule);
        attack::apply_step(r.mask, gm, ac.learning_rate, ac.step_rule);
        if (gamma_step(schedule, lt)) r.decays.push_back(it);
    }
    r.po = patch_obtrusiveness(r.mask);
    r.converged = r.target_trace.empty() || attack::smoothed(r.target_trace, 25, true) <= 1.0;
    r.patch.improved = attack::smoothed(r.patch.loss_curve, 25, true) <= attack::smoothed(r.patch.loss_curve, 25, false);
    return r;
}

std::vector<bool> spikes_after_decays(std::span<const double> trace, std::span<const std::size_t> decays,
                                      std::size_t before, std::size_t after) {
    std::vector<bool> out;
    out.reserve(decays.size());
    for (std::size_t d : decays) {
        if (d >= trace.size() || d + 1 >= trace.size()) {
            out.push_back(false);
            continue;
        }
        const std::size_t lo = d + 1 >= before ? d + 1 - before : 0;
        const double prior = *std::max_element(trace.begin() + static_cast<std::ptrdiff_t>(lo),
                                               trace.begin() + static_cast<std::ptrdiff_t>(d + 1));
        const std::size_t hi = std::min(trace.size(), d + 1 + after);
        const double next = *std::max_element(trace.begin() + static_cast<std::ptrdiff_t>(d + 1),
                                              trace.begin() + static_cast<std::ptrdiff_t>(hi));
        out.push_back(next > prior);
    }
    return out;
}

// ---------------------------------------------------------------- controls

double image_relative_opacity(double scale, double po, std::size_t height, std::size_t width) {
    const double edge = scale * static_cast<double>(std::min(height, width));
    return edge * edge * po / static_cast<double>(height * width);
}

ControlSpec make_opacity_matched_control(double po, const geometry::TransformSupport& semi_support,
                                         const AttackOptConfig& base, std::size_t image_edge,
                                         std::size_t iterations) {
    if (!(po > 0.0 && po <= 1.0)) throw ConfigError("control: PO must lie in (0, 1], got " + std::to_string(po));
    semi_support.validate();
    const double k = std::sqrt(po);
    ControlSpec c;
    c.po = po;
    c.semi_scale = 0.5 * (semi_support.scale_lo + semi_support.scale_hi);
    c.control_scale = c.semi_scale * k;
    c.config = base;
    c.config.iterations = iterations;
    c.config.support = semi_support;
    c.config.support.scale_lo = semi_support.scale_lo * k;
    c.config.support.scale_hi = semi_support.scale_hi * k;
    if (c.config.support.scale_lo * static_cast<double>(image_edge) < 1.0) {
        throw ConfigError("control: scale " + std::to_string(c.config.support.scale_lo) +
                          " gives a footprint below one pixel (PO " + std::to_string(po) + ")");
    }
    c.config.support.validate();
    return c;
}

bool opacity_matched(double semi_scale, double po, double control_scale, std::size_t image_edge) {
    const double e = static_cast<double>(image_edge);
    const double semi_side = std::round(semi_scale * e);
    const double control_side = std::round(control_scale * e);
    return std::abs(control_side - semi_side * std::sqrt(po)) <= 1.0;
}

}  // namespace patchforge::transparency

namespace patchforge::transparency {

namespace fs = std::filesystem;

std::vector<fs::path> save_transparent(const fs::path& stem, const TransparentResult& r,
                                       const TransparentConfig& config) {
    fs::path png = stem, mask_png = stem, json = stem;
    png += ".png";
    mask_png += "_mask.png";
    json += ".json";
    const auto spikes = spikes_after_decays(r.target_trace, r.decays, config.schedule.patience);
    const nlohmann::json j{{"schema", "patchforge.transparent"},
                           {"schema_version", kTransparentSchemaVersion},
                           {"toolkit_version", PATCHFORGE_VERSION},
                           {"target", r.patch.target},
                           {"seed", config.attack.seed},
                           {"po", r.po},
                           {"converged", r.converged},
                           {"gamma", {{"initial", config.schedule.initial},
                                      {"final", r.gamma_trace.empty() ? config.schedule.initial : r.gamma_trace.back()},
                                      {"stages", r.decays.size()},
                                      {"decay_iterations", r.decays},
                                      {"spikes", spikes}}},
                           {"config", config.to_json()},
                           {"target_trace", r.target_trace},
                           {"po_trace", r.po_trace},
                           {"patch", attack::tensor_to_json(r.patch.pixels)},
                           {"mask", attack::tensor_to_json(r.mask)}};
    io::write_atomic(png, io::encode_png(attack::to_image8(r.patch.pixels)));
    io::write_atomic(mask_png, io::encode_png(attack::to_image8(r.mask)));
    io::write_atomic(json, j.dump(2) + "\n");
    return {png, mask_png, json};
}

TransparentArtifact load_transparent(const fs::path& sidecar) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(sidecar));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(sidecar.string() + ": " + e.what());
    }
    if (j.value("schema", std::string()) != "patchforge.transparent") throw FormatError("not a transparent-patch sidecar");
    const int v = j.value("schema_version", 0);
    if (v != kTransparentSchemaVersion)
        throw VersionError("transparent sidecar schema version " + std::to_string(v) + ", expected " +
                           std::to_string(kTransparentSchemaVersion));
    TransparentArtifact a;
    try {
        const auto cfg = TransparentConfig::from_json(j.at("config"));
        a.schedule = cfg.schedule;
        a.mask_init = cfg.mask_init;
        a.patch.config = cfg.attack;
        a.patch.target = j.at("target").get<int>();
        a.patch.pixels = attack::tensor_from_json(j.at("patch"));
        a.mask = attack::tensor_from_json(j.at("mask"));
        a.po = j.at("po").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("transparent sidecar: ") + e.what());
    }
    return a;
}

}  // namespace patchforge::transparency
