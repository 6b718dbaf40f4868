#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchforge/attack/patch_attack.hpp"
#include "patchforge/geometry/transform.hpp"
#include "patchforge/model/dataset.hpp"
#include "patchforge/model/network.hpp"
#include "patchforge/saliency/placement.hpp"
#include "patchforge/transparency/transparency.hpp"

namespace patchforge::harness {

namespace fs = std::filesystem;
using attack::AttackOptConfig;
using attack::EvalOptions;
using geometry::LocationStrategy;
using geometry::TransformSupport;

enum class ExperimentKind { base, scale_up, scale_down, rotation, location, transparency };

std::string to_string(ExperimentKind k);
ExperimentKind parse_kind(const std::string& s);

// ---------------------------------------------------------------- data

struct DataSpec {
    model::DatasetFormat format = model::DatasetFormat::synthetic;
    fs::path path;  // idx / png_dir only
    model::SyntheticConfig synthetic{7, 6000, 10, 32};
    std::size_t train_count = 5000;

    nlohmann::json to_json() const;
    static DataSpec from_json(const nlohmann::json& j);
};

struct Data {
    model::Dataset train;
    model::Dataset test;
};

Data load_data(const DataSpec& spec);

// ---------------------------------------------------------------- plans

struct ExperimentPlan {
    ExperimentKind kind = ExperimentKind::base;
    std::vector<TransformSupport> train_supports;
    TransformSupport test_support;
    std::vector<int> targets;
    std::size_t eval_images = 256;
    std::uint64_t seed = 0;
    std::string model_ref;

    AttackOptConfig attack;  // support and seed are filled per cell
    EvalOptions eval;
    std::vector<LocationStrategy> test_locations;  // location plans
    transparency::TransparentConfig transparent;   // transparency plans
    std::size_t control_iterations = 500;
    bool control = true;  // transparency: also train the opacity-matched control

    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentPlan from_json(const nlohmann::json& j);
};

struct ScaleOptions {
    std::vector<double> pivots{0.1, 0.2, 0.3, 0.4};  // s_o
    double s_min = 0.05;
    double s_max = 0.5;
    std::size_t bins = 10;
    std::size_t samples_per_image = 10;
};

struct RotationOptions {
    std::vector<double> theta_max;  // defaults to multiples of pi/5
    double scale = 0.4;
    std::size_t bins = 16;
    std::size_t samples_per_image = 16;
};

struct LocationOptions {
    double scale_lo = 0.4;
    double scale_hi = 0.5;
    std::size_t samples_per_image = 4;
};

struct TransparencyOptions {
    double scale_lo = 0.4;
    double scale_hi = 0.5;
};

// Shared plan settings. Targets default to every class.
struct PlanCommon {
    std::vector<int> targets;
    std::size_t eval_images = 256;
    std::uint64_t seed = 0;
    std::string model_ref;
    AttackOptConfig attack;
};

ExperimentPlan base_plan(const PlanCommon& common, const TransformSupport& train, const TransformSupport& test,
                         std::size_t samples_per_image = 1);
// scale_up trains on [s_o, s_max], scale_down on [s_min, s_o].
ExperimentPlan scale_plan(const PlanCommon& common, ExperimentKind variant, const ScaleOptions& options = {});
ExperimentPlan rotation_plan(const PlanCommon& common, const RotationOptions& options = {});
ExperimentPlan location_plan(const PlanCommon& common, const LocationOptions& options = {});
ExperimentPlan transparency_plan(const PlanCommon& common, const transparency::TransparentConfig& config,
                                 const TransparencyOptions& options = {}, std::size_t control_iterations = 500);

// ---------------------------------------------------------------- cells and records

// One independent job: a (train support, target) pair with everything needed
// to rerun it from its persisted form.
struct Cell {
    std::string id;
    ExperimentKind kind = ExperimentKind::base;
    int target = 0;
    AttackOptConfig attack;  // seed derived from (plan seed, id)
    TransformSupport test_support;
    EvalOptions eval;
    std::uint64_t eval_seed = 0;
    std::vector<LocationStrategy> test_locations;
    std::optional<transparency::TransparentConfig> transparent;
    std::size_t control_iterations = 500;
    bool control = true;

    nlohmann::json to_json() const;
    static Cell from_json(const nlohmann::json& j);
};

std::vector<Cell> expand(const ExperimentPlan& plan);

struct Record {
    std::string cell_id;
    ExperimentKind kind = ExperimentKind::base;
    int target = 0;
    TransformSupport train_support;
    std::string test_condition;
    double test_value = 0.0;
    int test_bin = -1;
    double success_rate = 0.0;
    std::size_t trials = 0;
    std::size_t successes = 0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::vector<std::string> artifacts;
    double wall_time = 0.0;
    std::uint64_t seed = 0;
    std::string status = "ok";
    std::string error;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const;
    static Record from_json(const nlohmann::json& j);
};

struct CellResult {
    Cell cell;
    std::vector<Record> records;
    std::vector<attack::EvalResult> evals;  // raw trial logs, in record-group order
    bool failed = false;
};

struct Context {
    const model::Network<float>* net = nullptr;
    const Data* data = nullptr;
    fs::path out_dir = "out";
    std::size_t workers = 1;
    // Filled on demand for saliency placements.
    const std::vector<saliency::SaliencyMap>* train_maps = nullptr;
    const std::vector<saliency::SaliencyMap>* test_maps = nullptr;
};

// Directory holding a cell's artifacts, trial log and cell.json.
fs::path cell_dir(const fs::path& out_dir, const std::string& cell_id);

// Runs one cell, persisting its artifacts. Exceptions propagate.
CellResult run_cell(const Context& ctx, const Cell& cell);

// Reloads <cell dir>/cell.json and runs it again.
CellResult rerun_cell(const Context& ctx, const fs::path& cell_json);

struct PlanResult {
    std::vector<CellResult> cells;  // plan order
    std::size_t failures = 0;
    std::vector<Record> records() const;
};

// Runs every cell over a bounded worker pool. A failing cell becomes a
// "failed" record; the rest of the plan continues. Writes plan.json and
// records.json under ctx.out_dir.
PlanResult run_plan(const Context& ctx, const ExperimentPlan& plan);

PlanResult run_scale_sweep(const Context& ctx, const ExperimentPlan& plan);
PlanResult run_rotation_sweep(const Context& ctx, const ExperimentPlan& plan);
PlanResult run_location_grid(const Context& ctx, const ExperimentPlan& plan);
PlanResult run_transparency_study(const Context& ctx, const ExperimentPlan& plan);

// Per-bin success recomputed from a trial log.
struct BinCount {
    std::size_t trials = 0;
    std::size_t successes = 0;
    double rate() const { return trials ? static_cast<double>(successes) / static_cast<double>(trials) : 0.0; }
};
std::vector<BinCount> bin_counts(const attack::EvalResult& eval, std::size_t bins);

struct PerImageStats {
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t images = 0;
};
PerImageStats per_image_stats(const attack::EvalResult& eval);

// Trials with |theta| < limit, from the log.
BinCount near_angle(const attack::EvalResult& eval, double limit);

// Targets ranked by success in the random-train/random-test location cell:
// the per_bin best, the per_bin around the median and the per_bin worst.
struct TargetBins {
    std::vector<int> top, middle, bottom;
};
TargetBins location_target_bins(const std::vector<Record>& records, std::size_t per_bin = 3);

void write_trials_csv(const fs::path& path, const attack::EvalResult& eval, const std::string& group);

}  // namespace patchforge::harness
