// patchforge command line: model training, single attacks, sweeps and reports.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchforge/attack/artifact.hpp"
#include "patchforge/error.hpp"
#include "patchforge/harness/config.hpp"
#include "patchforge/harness/harness.hpp"
#include "patchforge/harness/report.hpp"
#include "patchforge/io/files.hpp"
#include "patchforge/model/serialize.hpp"
#include "patchforge/model/train.hpp"
#include "patchforge/saliency/saliency.hpp"

namespace fs = std::filesystem;
using namespace patchforge;
using namespace patchforge::harness;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
};

struct Env {
    RunConfig config;
    fs::path out;
    std::size_t workers = 1;
};

Env resolve(const Globals& g) {
    Env e;
    if (!g.config.empty()) e.config = RunConfig::load(g.config);
    if (g.seed) e.config.seed = *g.seed;
    e.out = g.out_dir;
    if (const char* o = std::getenv("PATCHFORGE_OUT"); o && *o) e.out = o;
    if (g.workers == 0) throw ConfigError("--workers must be positive");
    e.workers = g.workers;
    return e;
}

fs::path model_path(const Env& e, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!e.config.model_path.empty()) return e.config.model_path;
    return e.out / "model.pfm";
}

model::Network<float> open_model(const fs::path& p) {
    if (!fs::exists(p)) throw ConfigError("model " + p.string() + " not found; run train-model first");
    return model::load_model(p);
}

int finish_plan(const PlanResult& r, const fs::path& out) {
    const auto records = r.records();
    std::size_t ok = 0;
    for (const auto& rec : records) ok += rec.status == "ok" ? 1 : 0;
    if (!records.empty()) emit_report(records, {ReportFormat::csv, ReportFormat::json, ReportFormat::svg}, out);
    std::cout << records.size() << " records (" << ok << " ok) in " << out.string() << "\n";
    if (r.failures) {
        std::cerr << r.failures << " of " << r.cells.size() << " cells failed; partial results kept\n";
        return kRuntimeError;
    }
    return kOk;
}

int run_one_plan(const Env& e, const std::string& model_flag, const ExperimentPlan& plan, const fs::path& out) {
    plan.validate();
    const auto net = open_model(model_path(e, model_flag));
    const auto data = load_data(e.config.data);
    Context ctx;
    ctx.net = &net;
    ctx.data = &data;
    ctx.out_dir = out;
    ctx.workers = e.workers;
    return finish_plan(run_plan(ctx, plan), out);
}

std::vector<int> targets_or(const std::vector<int>& flag, const PlanCommon& c) {
    return flag.empty() ? c.targets : flag;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patchforge: adversarial patch toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "master seed (overrides the config)");
    app.add_option("--out-dir", g.out_dir, "output directory (PATCHFORGE_OUT overrides)");
    app.add_option("--workers", g.workers, "parallel cells");

    std::string model_flag;
    std::vector<int> target_flag;
    auto add_model = [&](CLI::App* s) { s->add_option("--model", model_flag, "model file (default <out-dir>/model.pfm)"); };
    auto add_targets = [&](CLI::App* s) { s->add_option("--target", target_flag, "target labels (default: config)"); };

    auto* train = app.add_subcommand("train-model", "train the classifier and save it");
    add_model(train);

    auto* attack = app.add_subcommand("attack", "opaque patch per target, evaluated on the train support");
    add_model(attack);
    add_targets(attack);

    auto* attack_t = app.add_subcommand("attack-transparent", "jointly optimized patch and mask per target");
    add_model(attack_t);
    add_targets(attack_t);

    std::string variant = "both";
    auto* sweep_scale = app.add_subcommand("sweep-scale", "constrained scale supports, tested over the full range");
    add_model(sweep_scale);
    add_targets(sweep_scale);
    sweep_scale->add_option("--variant", variant, "up, down or both")->check(CLI::IsMember({"up", "down", "both"}));

    auto* sweep_rot = app.add_subcommand("sweep-rotation", "rotation supports [-t, t], tested over the full circle");
    add_model(sweep_rot);
    add_targets(sweep_rot);

    auto* sweep_loc = app.add_subcommand("sweep-location", "3x3 grid of train/test placement strategies");
    add_model(sweep_loc);
    add_targets(sweep_loc);

    auto* study = app.add_subcommand("study-transparency", "semi-transparent patches against opacity-matched controls");
    add_model(study);
    add_targets(study);

    std::string patch_file;
    std::optional<double> theta_max, scale_lo, scale_hi;
    std::string location;
    auto* eval = app.add_subcommand("eval", "evaluate a saved patch");
    add_model(eval);
    eval->add_option("--patch", patch_file, "patch sidecar (.json)")->required()->check(CLI::ExistingFile);
    eval->add_option("--theta-max", theta_max, "test rotation bound (radians)");
    eval->add_option("--scale-lo", scale_lo, "test scale lower bound");
    eval->add_option("--scale-hi", scale_hi, "test scale upper bound");
    eval->add_option("--location", location, "random, saliency_min, saliency_max");

    std::string records_file;
    std::vector<std::string> formats{"csv", "json", "svg"};
    auto* report = app.add_subcommand("report", "tables and plots from a records file");
    report->add_option("--records", records_file, "records.json or records.csv (default <out-dir>/records.json)");
    report->add_option("--format", formats, "csv, json, svg")->delimiter(',');

    std::string cell_file;
    auto* rerun = app.add_subcommand("rerun", "run one persisted cell again");
    add_model(rerun);
    rerun->add_option("--cell", cell_file, "cells/<id>/cell.json")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        const Env e = resolve(g);
        const auto common = [&] {
            auto c = e.config.common();
            c.targets = targets_or(target_flag, c);
            return c;
        };

        if (train->parsed()) {
            const auto data = load_data(e.config.data);
            const auto arch = model::desk_architecture(e.config.data.synthetic.num_classes, data.train.height());
            auto cfg = e.config.train;
            if (g.seed) cfg.seed = *g.seed;
            const auto net = model::train_classifier(arch, data.train, data.test, cfg,
                                                     [](std::size_t ep, double loss, double acc) {
                                                         std::cerr << "epoch " << ep << " loss " << loss;
                                                         if (acc >= 0) std::cerr << " train acc " << acc;
                                                         std::cerr << "\n";
                                                     });
            const auto path = model_path(e, model_flag);
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            model::save_model(net, path);
            std::cout << "test accuracy " << net.info.test_accuracy << "\n" << path.string() << "\n";
            return kOk;
        }
        if (attack->parsed()) {
            const auto s = e.config.attack.support;
            return run_one_plan(e, model_flag, base_plan(common(), s, s, e.config.samples_per_image), e.out);
        }
        if (attack_t->parsed()) {
            auto p = transparency_plan(common(), e.config.transparent, e.config.transparency, e.config.control_iterations);
            p.control = false;
            p.eval.samples_per_image = e.config.samples_per_image;
            return run_one_plan(e, model_flag, p, e.out);
        }
        if (sweep_scale->parsed()) {
            int code = kOk;
            for (auto [name, kind] : {std::pair{"up", ExperimentKind::scale_up}, {"down", ExperimentKind::scale_down}}) {
                if (variant != "both" && variant != name) continue;
                const int c = run_one_plan(e, model_flag, scale_plan(common(), kind, e.config.scale),
                                           e.out / to_string(kind));
                code = std::max(code, c);
            }
            return code;
        }
        if (sweep_rot->parsed()) return run_one_plan(e, model_flag, rotation_plan(common(), e.config.rotation), e.out);
        if (sweep_loc->parsed()) return run_one_plan(e, model_flag, location_plan(common(), e.config.location), e.out);
        if (study->parsed()) {
            auto p = transparency_plan(common(), e.config.transparent, e.config.transparency, e.config.control_iterations);
            p.eval.samples_per_image = e.config.samples_per_image;
            return run_one_plan(e, model_flag, p, e.out);
        }
        if (eval->parsed()) {
            const auto net = open_model(model_path(e, model_flag));
            const auto data = load_data(e.config.data);
            const auto sidecar = nlohmann::json::parse(io::read_text(patch_file));
            attack::Patch patch;
            std::optional<diff::Tensor<float>> mask;
            if (sidecar.value("schema", std::string()) == "patchforge.transparent") {
                auto t = transparency::load_transparent(patch_file);
                patch = std::move(t.patch);
                mask = std::move(t.mask);
            } else {
                patch = attack::load_patch(patch_file);
            }
            auto support = patch.config.support;
            if (theta_max) support.theta_max = *theta_max;
            if (scale_lo) support.scale_lo = *scale_lo;
            if (scale_hi) support.scale_hi = *scale_hi;
            if (!location.empty()) support.location = geometry::parse_location(location);
            support.validate();
            std::vector<saliency::SaliencyMap> maps;
            if (support.location == geometry::LocationStrategy::saliency_min ||
                support.location == geometry::LocationStrategy::saliency_max)
                maps = saliency::compute_saliency_all(net, data.test);
            EvalOptions opts;
            opts.samples_per_image = e.config.samples_per_image;
            opts.max_images = e.config.eval_images;
            const auto seed = derive_seed(e.config.seed, hash_string("eval/t" + std::to_string(patch.target)));
            const auto r = attack::evaluate_attack(patch.pixels, mask ? &*mask : nullptr, net, data.test, patch.target,
                                                   support, opts, seed, maps.empty() ? nullptr : &maps);
            const fs::path dir = e.out / "eval";
            fs::create_directories(dir);
            const auto stem = fs::path(patch_file).stem().string();
            write_trials_csv(dir / (stem + "_trials.csv"), r, "eval");
            const nlohmann::json summary{{"patch", patch_file},
                                         {"target", patch.target},
                                         {"test_support", support.to_json()},
                                         {"success_rate", r.success_rate},
                                         {"trials", r.trials},
                                         {"successes", r.successes},
                                         {"ci_low", r.ci_low},
                                         {"ci_high", r.ci_high},
                                         {"seed", seed}};
            io::write_atomic(dir / (stem + ".json"), summary.dump(2) + "\n");
            std::cout << "target " << patch.target << " success " << r.success_rate << " [" << r.ci_low << ", "
                      << r.ci_high << "] over " << r.trials << " trials\n";
            return kOk;
        }
        if (report->parsed()) {
            const fs::path in = records_file.empty() ? e.out / "records.json" : fs::path(records_file);
            if (!fs::exists(in)) throw ConfigError("records file " + in.string() + " not found");
            std::vector<Record> records;
            if (in.extension() == ".csv") {
                records = parse_records_csv(io::read_text(in));
            } else {
                try {
                    records = parse_records_json(nlohmann::json::parse(io::read_text(in)));
                } catch (const nlohmann::json::parse_error& err) {
                    throw FormatError(in.string() + ": " + err.what());
                }
            }
            std::vector<ReportFormat> fmts;
            for (const auto& f : formats) fmts.push_back(parse_report_format(f));
            for (const auto& p : emit_report(records, fmts, e.out)) std::cout << p.string() << "\n";
            return kOk;
        }
        if (rerun->parsed()) {
            const auto net = open_model(model_path(e, model_flag));
            const auto data = load_data(e.config.data);
            Context ctx;
            ctx.net = &net;
            ctx.data = &data;
            ctx.out_dir = e.out;
            ctx.workers = 1;
            const auto cell = Cell::from_json(nlohmann::json::parse(io::read_text(cell_file)).at("cell"));
            std::vector<saliency::SaliencyMap> train_maps, test_maps;
            if (cell.kind == ExperimentKind::location) {
                train_maps = saliency::compute_saliency_all(net, data.train);
                test_maps = saliency::compute_saliency_all(net, data.test);
                ctx.train_maps = &train_maps;
                ctx.test_maps = &test_maps;
            }
            const auto r = run_cell(ctx, cell);
            for (const auto& rec : r.records)
                std::cout << rec.cell_id << " " << rec.test_condition << " " << rec.success_rate << "\n";
            return kOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kOk;
}
