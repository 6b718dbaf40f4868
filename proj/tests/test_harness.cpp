#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <unistd.h>

#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"
#include "patchforge/harness/config.hpp"
#include "patchforge/harness/harness.hpp"
#include "patchforge/harness/report.hpp"

using namespace patchforge;
using namespace patchforge::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("pf_harness_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Small data and an untrained net: enough to exercise the plumbing.
struct Fixture {
    Data data;
    model::Network<float> net;
    Fixture() : net(model::Network<float>::initialize(model::desk_architecture(), 1)) {
        DataSpec spec;
        spec.synthetic.count = 240;
        spec.train_count = 200;
        data = load_data(spec);
    }
    Context context(const fs::path& out) const {
        Context c;
        c.net = &net;
        c.data = &data;
        c.out_dir = out;
        return c;
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

PlanCommon tiny_common() {
    PlanCommon c;
    c.targets = {1, 2};
    c.eval_images = 8;
    c.seed = 5;
    c.attack.iterations = 3;
    c.attack.images_per_step = 4;
    return c;
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        rows.push_back(cols);
    }
    return rows;
}

Record sample_record(int k) {
    Record r;
    r.cell_id = "rotation/th" + std::to_string(k) + "/t" + std::to_string(k % 3);
    r.kind = ExperimentKind::rotation;
    r.target = k % 3;
    r.train_support = TransformSupport{std::numbers::pi * k / 5.0, 0.4, 0.4};
    r.test_condition = k % 2 ? "all" : "angle_bin=3";
    r.test_value = 1.0 / 3.0 + k;
    r.test_bin = k % 2 ? -1 : 3;
    r.trials = 257;
    r.successes = 100 + k;
    r.success_rate = static_cast<double>(r.successes) / 257.0;
    r.ci_low = 0.1 / 7.0;
    r.ci_high = 0.9 - 1e-17;
    r.artifacts = {"cells/a,b/patch.png", "cells/\"q\"/patch.json"};
    r.wall_time = 0.123456789012345678;
    r.seed = 0xfedcba9876543210ULL;
    r.extra = {{"note", "x, \"y\"\nz"}, {"po", 0.3}};
    return r;
}

}  // namespace

TEST(Report, CsvRoundTripsAtFullPrecision) {
    std::vector<Record> rs;
    for (int k = 0; k < 6; ++k) rs.push_back(sample_record(k));
    const auto back = parse_records_csv(records_csv(rs));
    ASSERT_EQ(back.size(), rs.size());
    for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_EQ(back[i].to_json(), rs[i].to_json()) << i;
    EXPECT_EQ(parse_records_json(records_json(rs)).size(), rs.size());
    EXPECT_THROW(parse_records_csv("nope\n1,2\n"), FormatError);
}

TEST(Report, EmptyRecordsRejected) {
    const auto dir = scratch("empty");
    EXPECT_THROW(emit_report({}, {ReportFormat::csv}, dir), ConfigError);
    fs::remove_all(dir);
}

TEST(Report, RotationSvgHasOnePolylinePerThetaMax) {
    std::vector<Record> rs;
    for (int th = 0; th < 6; ++th)
        for (int t = 0; t < 3; ++t)
            for (int b = 0; b < 16; ++b) {
                Record r;
                r.kind = ExperimentKind::rotation;
                r.target = t;
                r.cell_id = "rotation/th" + std::to_string(th) + "/t" + std::to_string(t);
                r.train_support = TransformSupport{std::numbers::pi * th / 5.0, 0.4, 0.4};
                r.test_condition = "angle_bin=" + std::to_string(b);
                r.test_bin = b;
                r.test_value = -std::numbers::pi + (b + 0.5) * std::numbers::pi / 8;
                r.trials = 10;
                r.successes = static_cast<std::size_t>((th + b) % 11);
                r.success_rate = r.successes / 10.0;
                rs.push_back(r);
            }
    const auto svgs = records_svg(rs);
    ASSERT_EQ(svgs.size(), 1u);
    const auto& body = svgs.front().second;
    std::size_t count = 0;
    for (auto pos = body.find("<polyline"); pos != std::string::npos; pos = body.find("<polyline", pos + 1)) ++count;
    EXPECT_EQ(count, 6u);
    // same records, same bytes
    const auto d1 = scratch("svg1"), d2 = scratch("svg2");
    const auto f1 = emit_report(rs, {ReportFormat::csv, ReportFormat::json, ReportFormat::svg}, d1);
    const auto f2 = emit_report(rs, {ReportFormat::csv, ReportFormat::json, ReportFormat::svg}, d2);
    ASSERT_EQ(f1.size(), f2.size());
    for (std::size_t i = 0; i < f1.size(); ++i) EXPECT_EQ(io::read_bytes(f1[i]), io::read_bytes(f2[i]));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Plans, Defaults) {
    const auto common = tiny_common();
    const auto up = scale_plan(common, ExperimentKind::scale_up);
    ASSERT_EQ(up.train_supports.size(), 4u);
    EXPECT_EQ(up.train_supports[0].scale_lo, 0.1);
    EXPECT_EQ(up.train_supports[0].scale_hi, 0.5);
    const auto down = scale_plan(common, ExperimentKind::scale_down);
    EXPECT_EQ(down.train_supports[3].scale_lo, 0.05);
    EXPECT_EQ(down.train_supports[3].scale_hi, 0.4);
    const auto rot = rotation_plan(common);
    ASSERT_EQ(rot.train_supports.size(), 6u);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(rot.train_supports[k].theta_max, k * std::numbers::pi / 5, 1e-15);
    EXPECT_EQ(rot.test_support.theta_max, std::numbers::pi);
    const auto loc = location_plan(common);
    EXPECT_EQ(loc.train_supports.size(), 3u);
    EXPECT_EQ(loc.test_locations.size(), 3u);
    EXPECT_EQ(expand(loc).size(), 6u);
}

TEST(Plans, TrainOutsideTestRejected) {
    auto p = base_plan(tiny_common(), TransformSupport{0.5, 0.4, 0.5}, TransformSupport{0.1, 0.4, 0.5});
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Plans, JsonRoundTrip) {
    const auto p = rotation_plan(tiny_common());
    EXPECT_EQ(ExperimentPlan::from_json(p.to_json()).to_json(), p.to_json());
    for (const auto& c : expand(p)) EXPECT_EQ(Cell::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Plans, RandomRandomLocationCellIsBaseCell) {
    const auto common = tiny_common();
    LocationOptions lo;
    const auto loc = expand(location_plan(common, lo));
    const TransformSupport s{0.0, lo.scale_lo, lo.scale_hi, LocationStrategy::random};
    const auto base = expand(base_plan(common, s, s, lo.samples_per_image));
    for (const auto& b : base) {
        const Cell* match = nullptr;
        for (const auto& c : loc)
            if (c.target == b.target && c.attack.support == s) match = &c;
        ASSERT_NE(match, nullptr);
        auto ja = match->attack.to_json(), jb = b.attack.to_json();
        ja.erase("seed");
        jb.erase("seed");
        EXPECT_EQ(ja, jb);
        EXPECT_EQ(match->eval.samples_per_image, b.eval.samples_per_image);
        EXPECT_EQ(match->eval_seed, b.eval_seed);
        EXPECT_EQ(match->test_support, b.test_support);
    }
}

TEST(Run, DegenerateScaleGridIsWellFormed) {
    const auto dir = scratch("degenerate");
    ScaleOptions o;
    o.pivots = {0.5};
    o.samples_per_image = 10;
    const auto plan = scale_plan(tiny_common(), ExperimentKind::scale_up, o);
    EXPECT_EQ(plan.train_supports[0].scale_lo, plan.train_supports[0].scale_hi);
    const auto res = run_scale_sweep(fixture().context(dir), plan);
    EXPECT_EQ(res.failures, 0u);
    for (const auto& cr : res.cells) {
        ASSERT_EQ(cr.records.size(), 11u);
        for (const auto& r : cr.records) {
            EXPECT_EQ(r.status, "ok");
            EXPECT_GT(r.trials, 0u);
            EXPECT_TRUE(r.success_rate >= 0.0 && r.success_rate <= 1.0);
        }
        // bins recomputed from the persisted trial log
        const auto rows = read_csv_rows(cell_dir(dir, cr.cell.id) / "trials.csv");
        ASSERT_EQ(rows.size(), cr.records.front().trials);
        std::map<int, std::pair<std::size_t, std::size_t>> bins;
        for (const auto& row : rows) {
            auto& b = bins[std::stoi(row.at(6))];
            ++b.first;
            b.second += std::stoul(row.at(8));
        }
        for (const auto& r : cr.records) {
            if (r.test_bin < 0) continue;
            EXPECT_EQ(bins[r.test_bin].first, r.trials);
            EXPECT_EQ(bins[r.test_bin].second, r.successes);
        }
    }
    EXPECT_TRUE(fs::exists(dir / "records.json"));
    EXPECT_TRUE(fs::exists(dir / "plan.json"));
    fs::remove_all(dir);
}

TEST(Run, RotationCellsEmitEveryAngleBin) {
    const auto dir = scratch("rotation");
    RotationOptions o;
    o.theta_max = {0.0, std::numbers::pi};
    o.samples_per_image = 16;
    auto common = tiny_common();
    common.targets = {3};
    const auto res = run_rotation_sweep(fixture().context(dir), rotation_plan(common, o));
    ASSERT_EQ(res.cells.size(), 2u);
    for (const auto& cr : res.cells) {
        ASSERT_EQ(cr.records.size(), 18u);  // all, near_zero, 16 bins
        std::size_t binned = 0;
        for (const auto& r : cr.records) binned += r.test_bin >= 0 ? r.trials : 0;
        EXPECT_EQ(binned, cr.records.front().trials);
        const auto near = near_angle(cr.evals.front(), std::numbers::pi / 16);
        EXPECT_EQ(cr.records[1].test_condition, "near_zero");
        EXPECT_EQ(cr.records[1].trials, near.trials);
    }
    fs::remove_all(dir);
}

TEST(Run, LocationStatsAreOrdered) {
    const auto dir = scratch("location");
    LocationOptions o;
    o.samples_per_image = 3;
    const auto res = run_location_grid(fixture().context(dir), location_plan(tiny_common(), o));
    EXPECT_EQ(res.failures, 0u);
    const auto recs = res.records();
    EXPECT_EQ(recs.size(), 18u);
    for (const auto& r : recs) {
        const auto& s = r.extra.at("per_image");
        EXPECT_LE(s.at("min").get<double>(), s.at("mean").get<double>());
        EXPECT_LE(s.at("mean").get<double>(), s.at("max").get<double>());
        EXPECT_NEAR(s.at("mean").get<double>(), r.success_rate, 1e-12);  // equal trials per image
    }
    const auto bins = location_target_bins(recs, 1);
    EXPECT_EQ(bins.top.size(), 1u);
    EXPECT_EQ(bins.bottom.size(), 1u);
    fs::remove_all(dir);
}

TEST(Run, TransparencyPairsShareImages) {
    const auto dir = scratch("transparency");
    transparency::TransparentConfig tc;
    tc.attack.iterations = 6;
    tc.attack.images_per_step = 4;
    auto common = tiny_common();
    common.targets = {4};
    const auto res = run_transparency_study(fixture().context(dir), transparency_plan(common, tc, {}, 4));
    ASSERT_EQ(res.failures, 0u);
    const auto recs = res.records();
    ASSERT_EQ(recs.size(), 2u);
    const auto& semi = recs[0];
    const auto& ctl = recs[1];
    EXPECT_EQ(semi.test_condition, "semi");
    EXPECT_EQ(ctl.test_condition, "control");
    EXPECT_EQ(semi.extra.at("eval_image_ids"), ctl.extra.at("eval_image_ids"));
    EXPECT_EQ(ctl.extra.at("po").get<double>(), 1.0);
    EXPECT_TRUE(ctl.extra.at("opacity_matched").get<bool>());
    EXPECT_TRUE(semi.extra.at("gamma_monotone").get<bool>());
    EXPECT_NEAR(ctl.extra.at("image_relative_opacity").get<double>(),
                semi.extra.at("image_relative_opacity").get<double>(), 1e-12);
    fs::remove_all(dir);
}

TEST(Run, RerunReproducesBytesAndRates) {
    const auto a = scratch("rerun_a"), b = scratch("rerun_b");
    const auto res = run_plan(fixture().context(a), rotation_plan(tiny_common(), {{0.0, 1.0}, 0.4, 4, 4}));
    for (const auto& cr : res.cells) {
        const auto again = rerun_cell(fixture().context(b), cell_dir(a, cr.cell.id) / "cell.json");
        ASSERT_EQ(again.records.size(), cr.records.size());
        for (std::size_t i = 0; i < cr.records.size(); ++i) {
            EXPECT_EQ(again.records[i].success_rate, cr.records[i].success_rate);
            EXPECT_EQ(again.records[i].trials, cr.records[i].trials);
        }
        for (const auto& art : cr.records.front().artifacts) EXPECT_EQ(io::read_bytes(a / art), io::read_bytes(b / art)) << art;
        EXPECT_EQ(io::read_bytes(cell_dir(a, cr.cell.id) / "trials.csv"),
                  io::read_bytes(cell_dir(b, cr.cell.id) / "trials.csv"));
    }
    // worker count does not change results
    auto ctx = fixture().context(scratch("rerun_c"));
    ctx.workers = 3;
    const auto par = run_plan(ctx, rotation_plan(tiny_common(), {{0.0, 1.0}, 0.4, 4, 4}));
    const auto r1 = res.records(), r2 = par.records();
    ASSERT_EQ(r1.size(), r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(r1[i].successes, r2[i].successes);
    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(ctx.out_dir);
}

TEST(Run, FailingCellIsIsolated) {
    const auto dir = scratch("failure");
    auto common = tiny_common();
    common.targets = {1, 12};  // no class 12
    const TransformSupport s{0.0, 0.4, 0.5};
    const auto res = run_plan(fixture().context(dir), base_plan(common, s, s));
    ASSERT_EQ(res.cells.size(), 2u);
    EXPECT_EQ(res.failures, 1u);
    EXPECT_FALSE(res.cells[0].failed);
    EXPECT_TRUE(res.cells[1].failed);
    const auto recs = res.records();
    EXPECT_EQ(recs.front().status, "ok");
    EXPECT_EQ(recs.back().status, "failed");
    EXPECT_NE(recs.back().error.find("12"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "records.json"));
    fs::remove_all(dir);
}

TEST(Config, SectionsParseAndUnknownRejected) {
    const auto j = nlohmann::json::parse(R"({"eval": {"targets": [2, 5], "eval_images": 64},
        "rotation": {"bins": 8}, "seed": 11, "attack": {"iterations": 7}})");
    const auto c = RunConfig::from_json(j);
    EXPECT_EQ(c.targets, (std::vector<int>{2, 5}));
    EXPECT_EQ(c.eval_images, 64u);
    EXPECT_EQ(c.rotation.bins, 8u);
    EXPECT_EQ(c.seed, 11u);
    EXPECT_EQ(c.attack.iterations, 7u);
    EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"rotaton": {}})")), ConfigError);
    EXPECT_EQ(RunConfig{}.common().targets.size(), 10u);
}

#ifdef PF_CLI
namespace {
int run_cli(const std::string& args) {
    const int rc = std::system((std::string(PF_CLI) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
}  // namespace

TEST(Cli, EnvOverridesOutDirAndExitCodes) {
    const auto dir = scratch("cli");
    {
        std::ofstream f(dir / "tiny.json");
        f << R"({"data": {"synthetic": {"count": 120}, "train_count": 100}, "train": {"epochs": 1}})";
    }
    const std::string env = "PATCHFORGE_OUT=" + (dir / "env").string() + " ";
    EXPECT_EQ(run_cli("--config " + (dir / "tiny.json").string() + " --out-dir " + (dir / "flag").string() +
                      " train-model"),
              0);
    EXPECT_TRUE(fs::exists(dir / "flag" / "model.pfm"));
    EXPECT_EQ(std::system((env + PF_CLI + " --config " + (dir / "tiny.json").string() + " --out-dir " +
                           (dir / "flag2").string() + " train-model >/dev/null 2>&1")
                              .c_str()),
              0);
    EXPECT_TRUE(fs::exists(dir / "env" / "model.pfm"));
    EXPECT_FALSE(fs::exists(dir / "flag2"));
    {
        std::ofstream f(dir / "bad.json");
        f << R"({"bogus": 1})";
    }
    EXPECT_EQ(run_cli("--config " + (dir / "bad.json").string() + " train-model"), 2);
    EXPECT_EQ(run_cli("--out-dir " + (dir / "none").string() + " attack"), 2);  // no model yet
    fs::remove_all(dir);
}
#endif
