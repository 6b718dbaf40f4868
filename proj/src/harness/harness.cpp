#include "patchforge/harness/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "patchforge/attack/artifact.hpp"
#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"
#include "patchforge/saliency/saliency.hpp"

namespace patchforge::harness {

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string support_tag(const TransformSupport& s) {
    std::string t = "th" + fixed(s.theta_max, 4) + "_s" + fixed(s.scale_lo, 4) + "-" + fixed(s.scale_hi, 4) + "_" +
                    geometry::to_string(s.location);
    if (s.location == LocationStrategy::fixed)
        t += std::to_string(s.fixed_row) + "x" + std::to_string(s.fixed_col);
    return t;
}

bool uses_saliency(const TransformSupport& s) {
    return s.location == LocationStrategy::saliency_min || s.location == LocationStrategy::saliency_max;
}

nlohmann::json eval_to_json(const EvalOptions& e) {
    nlohmann::json j{{"samples_per_image", e.samples_per_image}, {"max_images", e.max_images}};
    if (e.strata) {
        j["strata"] = {{"axis", e.strata->axis == attack::StrataAxis::scale ? "scale" : "angle"},
                       {"bins", e.strata->bins}};
    } else {
        j["strata"] = nullptr;
    }
    return j;
}

EvalOptions eval_from_json(const nlohmann::json& j) {
    EvalOptions e;
    e.samples_per_image = j.value("samples_per_image", e.samples_per_image);
    e.max_images = j.value("max_images", e.max_images);
    if (j.contains("strata") && !j.at("strata").is_null()) {
        attack::Strata s;
        const auto axis = j.at("strata").value("axis", std::string("scale"));
        if (axis != "scale" && axis != "angle") throw ConfigError("strata axis must be scale or angle");
        s.axis = axis == "scale" ? attack::StrataAxis::scale : attack::StrataAxis::angle;
        s.bins = j.at("strata").value("bins", s.bins);
        e.strata = s;
    }
    return e;
}

std::vector<int> all_targets(const std::vector<int>& given, std::size_t classes) {
    if (!given.empty()) return given;
    std::vector<int> t(classes);
    for (std::size_t i = 0; i < classes; ++i) t[i] = static_cast<int>(i);
    return t;
}

Record make_record(const Cell& cell, const attack::EvalResult& e) {
    Record r;
    r.cell_id = cell.id;
    r.kind = cell.kind;
    r.target = cell.target;
    r.train_support = cell.attack.support;
    r.seed = cell.attack.seed;
    r.success_rate = e.success_rate;
    r.trials = e.trials;
    r.successes = e.successes;
    r.ci_low = e.ci_low;
    r.ci_high = e.ci_high;
    return r;
}

void set_counts(Record& r, const BinCount& b) {
    r.trials = b.trials;
    r.successes = b.successes;
    r.success_rate = b.rate();
    const auto ci = attack::wilson95(b.successes, b.trials);
    r.ci_low = ci.low;
    r.ci_high = ci.high;
}

std::vector<std::string> path_strings(const std::vector<fs::path>& paths, const fs::path& base) {
    std::vector<std::string> out;
    for (const auto& p : paths) out.push_back(fs::relative(p, base).generic_string());
    return out;
}

}  // namespace

std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::base: return "base";
        case ExperimentKind::scale_up: return "scale_up";
        case ExperimentKind::scale_down: return "scale_down";
        case ExperimentKind::rotation: return "rotation";
        case ExperimentKind::location: return "location";
        case ExperimentKind::transparency: return "transparency";
    }
    return "?";
}

ExperimentKind parse_kind(const std::string& s) {
    for (auto k : {ExperimentKind::base, ExperimentKind::scale_up, ExperimentKind::scale_down, ExperimentKind::rotation,
                   ExperimentKind::location, ExperimentKind::transparency})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown experiment kind '" + s + "'");
}

// ---------------------------------------------------------------- data

nlohmann::json DataSpec::to_json() const {
    std::string f = format == model::DatasetFormat::idx       ? "idx"
                    : format == model::DatasetFormat::png_dir ? "png_dir"
                                                              : "synthetic";
    return {{"format", f}, {"path", path.string()}, {"synthetic", synthetic.to_json()}, {"train_count", train_count}};
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
    DataSpec d;
    try {
        d.format = model::parse_dataset_format(j.value("format", std::string("synthetic")));
        d.path = j.value("path", std::string());
        if (j.contains("synthetic")) d.synthetic = model::SyntheticConfig::from_json(j.at("synthetic"));
        d.train_count = j.value("train_count", d.train_count);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("data spec: ") + e.what());
    }
    return d;
}

Data load_data(const DataSpec& spec) {
    model::Dataset all;
    if (spec.format == model::DatasetFormat::synthetic) {
        all = model::synthetic_shapes(spec.synthetic);
    } else {
        model::IngestOptions o;
        o.num_classes = spec.synthetic.num_classes;
        o.image_size = spec.synthetic.image_size;
        all = model::ingest_dataset(spec.path, spec.format, o);
    }
    if (spec.train_count == 0 || spec.train_count >= all.size())
        throw ConfigError("train_count must leave a nonempty test split (have " + std::to_string(all.size()) +
                          " samples)");
    auto [train, test] = model::split_train_test(all, spec.train_count);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------- plans

void ExperimentPlan::validate() const {
    if (train_supports.empty()) throw ConfigError("plan has no train supports");
    if (targets.empty()) throw ConfigError("plan has no targets");
    if (eval_images == 0) throw ConfigError("eval_images must be positive");
    if (eval.samples_per_image == 0) throw ConfigError("samples_per_image must be positive");
    test_support.validate();
    attack.validate();
    for (const auto& s : train_supports) {
        s.validate();
        if (!test_support.contains(s))
            throw ConfigError("train support " + s.to_json().dump() + " is not inside the test support " +
                              test_support.to_json().dump());
    }
    if (kind == ExperimentKind::location && test_locations.empty()) throw ConfigError("location plan needs test locations");
    if (kind == ExperimentKind::transparency) transparent.validate();
}

nlohmann::json ExperimentPlan::to_json() const {
    nlohmann::json supports = nlohmann::json::array();
    for (const auto& s : train_supports) supports.push_back(s.to_json());
    nlohmann::json locs = nlohmann::json::array();
    for (auto l : test_locations) locs.push_back(geometry::to_string(l));
    return {{"kind", to_string(kind)},
            {"train_supports", supports},
            {"test_support", test_support.to_json()},
            {"targets", targets},
            {"eval_images", eval_images},
            {"seed", seed},
            {"model_ref", model_ref},
            {"attack", attack.to_json()},
            {"eval", eval_to_json(eval)},
            {"test_locations", locs},
            {"transparent", transparent.to_json()},
            {"control_iterations", control_iterations},
            {"control", control}};
}

ExperimentPlan ExperimentPlan::from_json(const nlohmann::json& j) {
    ExperimentPlan p;
    try {
        p.kind = parse_kind(j.at("kind").get<std::string>());
        for (const auto& s : j.at("train_supports")) p.train_supports.push_back(TransformSupport::from_json(s));
        p.test_support = TransformSupport::from_json(j.at("test_support"));
        p.targets = j.at("targets").get<std::vector<int>>();
        p.eval_images = j.value("eval_images", p.eval_images);
        p.seed = j.value("seed", p.seed);
        p.model_ref = j.value("model_ref", std::string());
        if (j.contains("attack")) p.attack = AttackOptConfig::from_json(j.at("attack"));
        if (j.contains("eval")) p.eval = eval_from_json(j.at("eval"));
        for (const auto& l : j.value("test_locations", nlohmann::json::array()))
            p.test_locations.push_back(geometry::parse_location(l.get<std::string>()));
        if (j.contains("transparent")) p.transparent = transparency::TransparentConfig::from_json(j.at("transparent"));
        p.control_iterations = j.value("control_iterations", p.control_iterations);
        p.control = j.value("control", p.control);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    p.validate();
    return p;
}

ExperimentPlan base_plan(const PlanCommon& c, const TransformSupport& train, const TransformSupport& test,
                         std::size_t samples_per_image) {
    ExperimentPlan p;
    p.kind = ExperimentKind::base;
    p.train_supports = {train};
    p.test_support = test;
    p.targets = all_targets(c.targets, 10);
    p.eval_images = c.eval_images;
    p.seed = c.seed;
    p.model_ref = c.model_ref;
    p.attack = c.attack;
    p.eval.samples_per_image = samples_per_image;
    return p;
}

ExperimentPlan scale_plan(const PlanCommon& c, ExperimentKind variant, const ScaleOptions& o) {
    if (variant != ExperimentKind::scale_up && variant != ExperimentKind::scale_down)
        throw ConfigError("scale plan variant must be scale_up or scale_down");
    if (!(o.s_min > 0.0 && o.s_min <= o.s_max && o.s_max <= 1.0)) throw ConfigError("need 0 < s_min <= s_max <= 1");
    ExperimentPlan p;
    p.kind = variant;
    for (double so : o.pivots) {
        if (so < o.s_min || so > o.s_max)
            throw ConfigError("scale pivot " + std::to_string(so) + " outside [s_min, s_max]");
        TransformSupport s{0.0, 0.0, 0.0, LocationStrategy::random};
        s.scale_lo = variant == ExperimentKind::scale_up ? so : o.s_min;
        s.scale_hi = variant == ExperimentKind::scale_up ? o.s_max : so;
        p.train_supports.push_back(s);
    }
    p.test_support = {0.0, o.s_min, o.s_max, LocationStrategy::random};
    p.targets = all_targets(c.targets, 10);
    p.eval_images = c.eval_images;
    p.seed = c.seed;
    p.model_ref = c.model_ref;
    p.attack = c.attack;
    p.eval.samples_per_image = o.samples_per_image;
    p.eval.strata = attack::Strata{attack::StrataAxis::scale, o.bins};
    return p;
}

ExperimentPlan rotation_plan(const PlanCommon& c, const RotationOptions& o) {
    ExperimentPlan p;
    p.kind = ExperimentKind::rotation;
    auto thetas = o.theta_max;
    if (thetas.empty())
        for (int k = 0; k <= 5; ++k) thetas.push_back(k * std::numbers::pi / 5.0);
    for (double t : thetas) p.train_supports.push_back({t, o.scale, o.scale, LocationStrategy::random});
    p.test_support = {std::numbers::pi, o.scale, o.scale, LocationStrategy::random};
    p.targets = all_targets(c.targets, 10);
    p.eval_images = c.eval_images;
    p.seed = c.seed;
    p.model_ref = c.model_ref;
    p.attack = c.attack;
    p.eval.samples_per_image = o.samples_per_image;
    p.eval.strata = attack::Strata{attack::StrataAxis::angle, o.bins};
    return p;
}

ExperimentPlan location_plan(const PlanCommon& c, const LocationOptions& o) {
    ExperimentPlan p;
    p.kind = ExperimentKind::location;
    const LocationStrategy strategies[3] = {LocationStrategy::saliency_min, LocationStrategy::saliency_max,
                                            LocationStrategy::random};
    for (auto s : strategies) p.train_supports.push_back({0.0, o.scale_lo, o.scale_hi, s});
    p.test_support = {0.0, o.scale_lo, o.scale_hi, LocationStrategy::random};
    p.test_locations.assign(std::begin(strategies), std::end(strategies));
    p.targets = all_targets(c.targets, 10);
    p.eval_images = c.eval_images;
    p.seed = c.seed;
    p.model_ref = c.model_ref;
    p.attack = c.attack;
    p.eval.samples_per_image = o.samples_per_image;
    return p;
}

ExperimentPlan transparency_plan(const PlanCommon& c, const transparency::TransparentConfig& config,
                                 const TransparencyOptions& o, std::size_t control_iterations) {
    ExperimentPlan p;
    p.kind = ExperimentKind::transparency;
    const TransformSupport s{0.0, o.scale_lo, o.scale_hi, LocationStrategy::random};
    p.train_supports = {s};
    p.test_support = s;
    p.targets = all_targets(c.targets, 10);
    p.eval_images = c.eval_images;
    p.seed = c.seed;
    p.model_ref = c.model_ref;
    p.attack = c.attack;
    p.transparent = config;
    p.control_iterations = control_iterations;
    return p;
}

// ---------------------------------------------------------------- cells

nlohmann::json Cell::to_json() const {
    nlohmann::json locs = nlohmann::json::array();
    for (auto l : test_locations) locs.push_back(geometry::to_string(l));
    nlohmann::json j{{"id", id},
                     {"kind", to_string(kind)},
                     {"target", target},
                     {"attack", attack.to_json()},
                     {"test_support", test_support.to_json()},
                     {"eval", eval_to_json(eval)},
                     {"eval_seed", eval_seed},
                     {"test_locations", locs},
                     {"control_iterations", control_iterations},
                     {"control", control}};
    j["transparent"] = transparent ? transparent->to_json() : nlohmann::json(nullptr);
    return j;
}

Cell Cell::from_json(const nlohmann::json& j) {
    Cell c;
    try {
        c.id = j.at("id").get<std::string>();
        c.kind = parse_kind(j.at("kind").get<std::string>());
        c.target = j.at("target").get<int>();
        c.attack = AttackOptConfig::from_json(j.at("attack"));
        c.test_support = TransformSupport::from_json(j.at("test_support"));
        c.eval = eval_from_json(j.at("eval"));
        c.eval_seed = j.at("eval_seed").get<std::uint64_t>();
        for (const auto& l : j.value("test_locations", nlohmann::json::array()))
            c.test_locations.push_back(geometry::parse_location(l.get<std::string>()));
        c.control_iterations = j.value("control_iterations", c.control_iterations);
        c.control = j.value("control", c.control);
        if (j.contains("transparent") && !j.at("transparent").is_null())
            c.transparent = transparency::TransparentConfig::from_json(j.at("transparent"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("cell: ") + e.what());
    }
    return c;
}

std::vector<Cell> expand(const ExperimentPlan& plan) {
    plan.validate();
    std::vector<Cell> cells;
    for (const auto& support : plan.train_supports) {
        for (int target : plan.targets) {
            Cell c;
            c.kind = plan.kind;
            c.target = target;
            c.id = to_string(plan.kind) + "/" + support_tag(support) + "/t" + std::to_string(target);
            c.attack = plan.attack;
            c.attack.support = support;
            c.attack.seed = derive_seed(plan.seed, hash_string(c.id));
            c.test_support = plan.test_support;
            c.eval = plan.eval;
            c.eval.max_images = plan.eval_images;
            // Shared per target so every cell of a target sees the same trials.
            c.eval_seed = derive_seed(plan.seed, hash_string("eval/t" + std::to_string(target)));
            c.test_locations = plan.test_locations;
            if (plan.kind == ExperimentKind::transparency) {
                auto t = plan.transparent;
                t.attack.support = support;
                t.attack.seed = c.attack.seed;
                c.transparent = t;
                c.attack = t.attack;
                c.control_iterations = plan.control_iterations;
                c.control = plan.control;
            }
            cells.push_back(std::move(c));
        }
    }
    return cells;
}

// ---------------------------------------------------------------- records

nlohmann::json Record::to_json() const {
    return {{"cell_id", cell_id},
            {"kind", to_string(kind)},
            {"target", target},
            {"train_support", train_support.to_json()},
            {"test_condition", test_condition},
            {"test_value", test_value},
            {"test_bin", test_bin},
            {"success_rate", success_rate},
            {"trials", trials},
            {"successes", successes},
            {"ci_low", ci_low},
            {"ci_high", ci_high},
            {"artifacts", artifacts},
            {"wall_time", wall_time},
            {"seed", seed},
            {"status", status},
            {"error", error},
            {"extra", extra}};
}

Record Record::from_json(const nlohmann::json& j) {
    Record r;
    try {
        r.cell_id = j.at("cell_id").get<std::string>();
        r.kind = parse_kind(j.at("kind").get<std::string>());
        r.target = j.at("target").get<int>();
        r.train_support = TransformSupport::from_json(j.at("train_support"));
        r.test_condition = j.value("test_condition", std::string());
        r.test_value = j.value("test_value", 0.0);
        r.test_bin = j.value("test_bin", -1);
        r.success_rate = j.at("success_rate").get<double>();
        r.trials = j.at("trials").get<std::size_t>();
        r.successes = j.value("successes", std::size_t{0});
        r.ci_low = j.value("ci_low", 0.0);
        r.ci_high = j.value("ci_high", 0.0);
        r.artifacts = j.value("artifacts", std::vector<std::string>{});
        r.wall_time = j.value("wall_time", 0.0);
        r.seed = j.value("seed", std::uint64_t{0});
        r.status = j.value("status", std::string("ok"));
        r.error = j.value("error", std::string());
        r.extra = j.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("record: ") + e.what());
    }
    return r;
}

std::vector<Record> PlanResult::records() const {
    std::vector<Record> out;
    for (const auto& c : cells) out.insert(out.end(), c.records.begin(), c.records.end());
    return out;
}

// ---------------------------------------------------------------- trial-log aggregation

std::vector<BinCount> bin_counts(const attack::EvalResult& eval, std::size_t bins) {
    std::vector<BinCount> out(bins);
    for (const auto& t : eval.log) {
        if (t.bin < 0 || static_cast<std::size_t>(t.bin) >= bins) throw Error("trial log has no bin " + std::to_string(t.bin));
        auto& b = out[static_cast<std::size_t>(t.bin)];
        ++b.trials;
        if (t.predicted == eval.target) ++b.successes;
    }
    return out;
}

BinCount near_angle(const attack::EvalResult& eval, double limit) {
    BinCount b;
    for (const auto& t : eval.log) {
        if (std::abs(t.spec.theta) < limit) {
            ++b.trials;
            if (t.predicted == eval.target) ++b.successes;
        }
    }
    return b;
}

PerImageStats per_image_stats(const attack::EvalResult& eval) {
    std::map<std::size_t, BinCount> per;
    for (const auto& t : eval.log) {
        auto& b = per[t.image_id];
        ++b.trials;
        if (t.predicted == eval.target) ++b.successes;
    }
    PerImageStats s;
    if (per.empty()) return s;
    s.images = per.size();
    s.min = 1.0;
    s.max = 0.0;
    double sum = 0.0;
    for (const auto& [id, b] : per) {
        const double r = b.rate();
        sum += r;
        s.min = std::min(s.min, r);
        s.max = std::max(s.max, r);
    }
    s.mean = sum / static_cast<double>(per.size());
    double var = 0.0;
    for (const auto& [id, b] : per) var += (b.rate() - s.mean) * (b.rate() - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(per.size()));
    // Rounding can leave the mean an ulp outside [min, max] when all rates agree.
    s.mean = std::clamp(s.mean, s.min, s.max);
    return s;
}

TargetBins location_target_bins(const std::vector<Record>& records, std::size_t per_bin) {
    std::vector<std::pair<double, int>> ranked;
    for (const auto& r : records) {
        if (r.kind != ExperimentKind::location || r.status != "ok") continue;
        if (r.train_support.location == LocationStrategy::random && r.test_condition == "test=random")
            ranked.emplace_back(r.success_rate, r.target);
    }
    // best first; equal rates fall back to the smaller target id
    std::sort(ranked.begin(), ranked.end(),
              [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    TargetBins bins;
    const std::size_t n = ranked.size();
    const std::size_t k = std::min(per_bin, n);
    for (std::size_t i = 0; i < k; ++i) bins.top.push_back(ranked[i].second);
    for (std::size_t i = 0; i < k; ++i) bins.bottom.push_back(ranked[n - k + i].second);
    const std::size_t start = n > k ? (n - k) / 2 : 0;
    for (std::size_t i = start; i < start + k; ++i) bins.middle.push_back(ranked[i].second);
    return bins;
}

void write_trials_csv(const fs::path& path, const attack::EvalResult& eval, const std::string& group) {
    std::ostringstream os;
    os << "group,image_id,theta,scale,row,col,bin,predicted,success\n";
    char buf[256];
    for (const auto& t : eval.log) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%zu,%zu,%d,%d,%d\n", group.c_str(), t.image_id, t.spec.theta,
                      t.spec.scale, t.spec.row, t.spec.col, t.bin, t.predicted, t.predicted == eval.target ? 1 : 0);
        os << buf;
    }
    io::write_atomic(path, os.str());
}

// ---------------------------------------------------------------- running cells

fs::path cell_dir(const fs::path& out_dir, const std::string& cell_id) {
    std::string name = cell_id;
    std::replace(name.begin(), name.end(), '/', '.');
    return out_dir / "cells" / name;
}

namespace {

const std::vector<saliency::SaliencyMap>* maps_for(const TransformSupport& s,
                                                   const std::vector<saliency::SaliencyMap>* maps, const char* which) {
    if (!uses_saliency(s)) return nullptr;
    if (!maps) throw ConfigError(std::string("saliency placement needs ") + which + " saliency maps");
    return maps;
}

void run_opaque(const Context& ctx, const Cell& cell, const fs::path& dir, CellResult& out) {
    const auto& data = *ctx.data;
    const auto pool = attack::make_pool(data.train, cell.target, maps_for(cell.attack.support, ctx.train_maps, "train"));
    const auto patch = attack::optimize_patch(*ctx.net, pool, cell.target, cell.attack);
    const auto artifacts = path_strings(attack::save_patch(dir / "patch", patch), ctx.out_dir);

    auto finish = [&](Record r) {
        r.artifacts = artifacts;
        r.extra["improved"] = patch.improved;
        out.records.push_back(std::move(r));
    };

    if (cell.kind == ExperimentKind::location) {
        for (auto loc : cell.test_locations) {
            auto test = cell.test_support;
            test.location = loc;
            auto e = attack::evaluate_attack(patch.pixels, nullptr, *ctx.net, data.test, cell.target, test, cell.eval,
                                             cell.eval_seed, maps_for(test, ctx.test_maps, "test"));
            Record r = make_record(cell, e);
            r.test_condition = "test=" + geometry::to_string(loc);
            const auto st = per_image_stats(e);
            r.extra["train_location"] = geometry::to_string(cell.attack.support.location);
            r.extra["test_location"] = geometry::to_string(loc);
            r.extra["per_image"] = {{"mean", st.mean}, {"std", st.stddev}, {"min", st.min}, {"max", st.max},
                                    {"images", st.images}};
            write_trials_csv(dir / ("trials_" + geometry::to_string(loc) + ".csv"), e, r.test_condition);
            finish(std::move(r));
            out.evals.push_back(std::move(e));
        }
        return;
    }

    auto e = attack::evaluate_attack(patch.pixels, nullptr, *ctx.net, data.test, cell.target, cell.test_support,
                                     cell.eval, cell.eval_seed, maps_for(cell.test_support, ctx.test_maps, "test"));
    Record all = make_record(cell, e);
    all.test_condition = "all";
    finish(all);
    if (cell.eval.strata) {
        const auto bins = bin_counts(e, cell.eval.strata->bins);
        const bool scale_axis = cell.eval.strata->axis == attack::StrataAxis::scale;
        const double lo = scale_axis ? cell.test_support.scale_lo : -cell.test_support.theta_max;
        const double hi = scale_axis ? cell.test_support.scale_hi : cell.test_support.theta_max;
        if (!scale_axis) {
            Record nz = make_record(cell, e);
            nz.test_condition = "near_zero";
            nz.test_value = std::numbers::pi / 16.0;
            set_counts(nz, near_angle(e, std::numbers::pi / 16.0));
            finish(nz);
        }
        for (std::size_t k = 0; k < bins.size(); ++k) {
            Record r = make_record(cell, e);
            r.test_condition = std::string(scale_axis ? "scale_bin=" : "angle_bin=") + std::to_string(k);
            r.test_bin = static_cast<int>(k);
            r.test_value = lo + (hi - lo) * (static_cast<double>(k) + 0.5) / static_cast<double>(bins.size());
            set_counts(r, bins[k]);
            finish(r);
        }
    }
    write_trials_csv(dir / "trials.csv", e, "all");
    out.evals.push_back(std::move(e));
}

void run_transparent(const Context& ctx, const Cell& cell, const fs::path& dir, CellResult& out) {
    const auto& data = *ctx.data;
    const auto& cfg = *cell.transparent;
    const auto pool = attack::make_pool(data.train, cell.target, maps_for(cfg.attack.support, ctx.train_maps, "train"));
    const auto tr = transparency::optimize_transparent(*ctx.net, pool, cell.target, cfg);
    const auto semi_paths = path_strings(transparency::save_transparent(dir / "semi", tr, cfg), ctx.out_dir);
    auto es = attack::evaluate_attack(tr.patch.pixels, &tr.mask, *ctx.net, data.test, cell.target, cell.test_support,
                                      cell.eval, cell.eval_seed, maps_for(cell.test_support, ctx.test_maps, "test"));
    const std::size_t edge = std::min(data.test.height(), data.test.width());
    const double semi_scale = 0.5 * (cfg.attack.support.scale_lo + cfg.attack.support.scale_hi);
    const auto spikes = transparency::spikes_after_decays(tr.target_trace, tr.decays, cfg.schedule.patience);
    bool monotone = true;
    for (std::size_t i = 1; i < tr.gamma_trace.size(); ++i) monotone = monotone && tr.gamma_trace[i] <= tr.gamma_trace[i - 1];

    Record semi = make_record(cell, es);
    semi.test_condition = "semi";
    semi.artifacts = semi_paths;
    semi.extra = {{"po", tr.po},
                  {"image_relative_opacity", transparency::image_relative_opacity(semi_scale, tr.po, data.test.height(),
                                                                                  data.test.width())},
                  {"scale", semi_scale},
                  {"decays", tr.decays},
                  {"spikes", spikes},
                  {"gamma_monotone", monotone},
                  {"gamma_final", tr.gamma_trace.empty() ? cfg.schedule.initial : tr.gamma_trace.back()},
                  {"converged", tr.converged},
                  {"eval_image_ids", es.image_ids}};
    write_trials_csv(dir / "trials_semi.csv", es, "semi");

    if (!cell.control) {
        out.records.push_back(semi);
        out.evals.push_back(std::move(es));
        return;
    }

    transparency::ControlSpec control;
    try {
        control = transparency::make_opacity_matched_control(tr.po, cfg.attack.support, cfg.attack, edge,
                                                             cell.control_iterations);
    } catch (const ConfigError& e) {
        semi.extra["control_error"] = e.what();
        out.records.push_back(semi);
        out.evals.push_back(std::move(es));
        Record skipped = semi;
        skipped.test_condition = "control";
        skipped.status = "skipped";
        skipped.error = e.what();
        skipped.trials = 0;
        skipped.successes = 0;
        skipped.success_rate = 0.0;
        skipped.artifacts.clear();
        skipped.extra = {{"po", 1.0}};
        out.records.push_back(skipped);
        return;
    }
    control.config.seed = derive_seed(cfg.attack.seed, hash_string("control"));
    const auto cp = attack::optimize_patch(*ctx.net, pool, cell.target, control.config);
    const auto control_paths = path_strings(attack::save_patch(dir / "control", cp), ctx.out_dir);
    auto ec = attack::evaluate_attack(cp.pixels, nullptr, *ctx.net, data.test, cell.target, control.config.support,
                                      cell.eval, cell.eval_seed, maps_for(control.config.support, ctx.test_maps, "test"));
    write_trials_csv(dir / "trials_control.csv", ec, "control");

    Record ctl = make_record(cell, ec);
    ctl.train_support = control.config.support;
    ctl.seed = control.config.seed;
    ctl.test_condition = "control";
    ctl.artifacts = control_paths;
    ctl.extra = {{"po", 1.0},
                 {"matched_po", tr.po},
                 {"image_relative_opacity", transparency::image_relative_opacity(control.control_scale, 1.0,
                                                                                 data.test.height(), data.test.width())},
                 {"scale", control.control_scale},
                 {"opacity_matched", transparency::opacity_matched(semi_scale, tr.po, control.control_scale, edge)},
                 {"improved", cp.improved},
                 {"eval_image_ids", ec.image_ids}};
    semi.extra["control_scale"] = control.control_scale;
    out.records.push_back(semi);
    out.records.push_back(ctl);
    out.evals.push_back(std::move(es));
    out.evals.push_back(std::move(ec));
}

}  // namespace

CellResult run_cell(const Context& ctx, const Cell& cell) {
    if (!ctx.net || !ctx.data) throw ConfigError("context needs a model and data");
    const auto t0 = std::chrono::steady_clock::now();
    CellResult out;
    out.cell = cell;
    const fs::path dir = cell_dir(ctx.out_dir, cell.id);
    fs::create_directories(dir);
    if (cell.kind == ExperimentKind::transparency) {
        if (!cell.transparent) throw ConfigError("transparency cell without a transparent config");
        run_transparent(ctx, cell, dir, out);
    } else {
        run_opaque(ctx, cell, dir, out);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json records = nlohmann::json::array();
    for (auto& r : out.records) {
        r.wall_time = wall;
        records.push_back(r.to_json());
    }
    io::write_atomic(dir / "cell.json", nlohmann::json{{"cell", cell.to_json()}, {"records", records}}.dump(2) + "\n");
    return out;
}

CellResult rerun_cell(const Context& ctx, const fs::path& cell_json) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(cell_json));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(cell_json.string() + ": " + e.what());
    }
    return run_cell(ctx, Cell::from_json(j.at("cell")));
}

PlanResult run_plan(const Context& ctx_in, const ExperimentPlan& plan) {
    if (!ctx_in.net || !ctx_in.data) throw ConfigError("context needs a model and data");
    const auto cells = expand(plan);
    Context ctx = ctx_in;

    std::vector<saliency::SaliencyMap> train_maps, test_maps;
    bool need_maps = std::any_of(plan.train_supports.begin(), plan.train_supports.end(), uses_saliency) ||
                     uses_saliency(plan.test_support);
    for (auto l : plan.test_locations)
        need_maps = need_maps || l == LocationStrategy::saliency_min || l == LocationStrategy::saliency_max;
    if (need_maps && !ctx.train_maps) {
        train_maps = saliency::compute_saliency_all(*ctx.net, ctx.data->train);
        ctx.train_maps = &train_maps;
    }
    if (need_maps && !ctx.test_maps) {
        test_maps = saliency::compute_saliency_all(*ctx.net, ctx.data->test);
        ctx.test_maps = &test_maps;
    }

    fs::create_directories(ctx.out_dir);
    io::write_atomic(ctx.out_dir / "plan.json", plan.to_json().dump(2) + "\n");

    PlanResult result;
    result.cells.resize(cells.size());
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const auto& cell = cells[i];
            auto& slot = result.cells[i];
            try {
                slot = run_cell(ctx, cell);
            } catch (const std::exception& e) {
                slot = CellResult{};
                slot.cell = cell;
                slot.failed = true;
                Record r;
                r.cell_id = cell.id;
                r.kind = cell.kind;
                r.target = cell.target;
                r.train_support = cell.attack.support;
                r.seed = cell.attack.seed;
                r.status = "failed";
                r.error = e.what();
                slot.records.push_back(r);
            }
            const std::size_t n = done.fetch_add(1) + 1;
            std::lock_guard<std::mutex> lock(log_mutex);
            std::cerr << "[" << n << "/" << cells.size() << "] " << cell.id << (slot.failed ? " FAILED: " : " ok")
                      << (slot.failed ? slot.records.front().error : std::string()) << "\n";
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(ctx.workers, cells.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& c : result.cells) result.failures += c.failed ? 1 : 0;

    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : result.records()) records.push_back(r.to_json());
    io::write_atomic(ctx.out_dir / "records.json", records.dump(2) + "\n");
    return result;
}

namespace {

PlanResult run_kind(const Context& ctx, const ExperimentPlan& plan, std::initializer_list<ExperimentKind> kinds,
                    const char* what) {
    if (std::find(kinds.begin(), kinds.end(), plan.kind) == kinds.end())
        throw ConfigError(std::string(what) + " got a " + to_string(plan.kind) + " plan");
    return run_plan(ctx, plan);
}

}  // namespace

PlanResult run_scale_sweep(const Context& ctx, const ExperimentPlan& plan) {
    return run_kind(ctx, plan, {ExperimentKind::scale_up, ExperimentKind::scale_down}, "scale sweep");
}

PlanResult run_rotation_sweep(const Context& ctx, const ExperimentPlan& plan) {
    return run_kind(ctx, plan, {ExperimentKind::rotation}, "rotation sweep");
}

PlanResult run_location_grid(const Context& ctx, const ExperimentPlan& plan) {
    return run_kind(ctx, plan, {ExperimentKind::location}, "location grid");
}

PlanResult run_transparency_study(const Context& ctx, const ExperimentPlan& plan) {
    return run_kind(ctx, plan, {ExperimentKind::transparency}, "transparency study");
}

}  // namespace patchforge::harness
