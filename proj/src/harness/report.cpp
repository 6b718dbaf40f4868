#include "patchforge/harness/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"

namespace patchforge::harness {

namespace {

const char* kColumns[] = {"cell_id",       "kind",           "target",     "train_theta_max", "train_scale_lo",
                          "train_scale_hi", "train_location", "fixed_row",  "fixed_col",       "test_condition",
                          "test_value",    "test_bin",       "success_rate", "trials",         "successes",
                          "ci_low",        "ci_high",        "wall_time",  "seed",            "status",
                          "error",         "artifacts",      "extra"};
constexpr std::size_t kNumColumns = sizeof kColumns / sizeof kColumns[0];

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// RFC 4180 style rows: quoted fields may hold commas, quotes and newlines.
std::vector<std::vector<std::string>> split_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw FormatError("csv: unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

double to_double(const std::string& s, const char* col) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(std::string("csv: bad number in ") + col + ": '" + s + "'");
    }
}

std::uint64_t to_u64(const std::string& s, const char* col) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(std::string("csv: bad integer in ") + col + ": '" + s + "'");
    }
}

// ------------------------------------------------------------------ svg

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series, bool lines) {
    const double W = 640, H = 420, L = 70, R = 180, T = 40, B = 60;
    double xmin = 0, xmax = 1;
    bool first = true;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            xmin = first ? x : std::min(xmin, x);
            xmax = first ? x : std::max(xmax, x);
            first = false;
        }
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - std::clamp(y, 0.0, 1.0) * (H - T - B); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double y = k / 4.0;
        os << "<text x=\"" << L - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << num(y) << "</text>\n";
        const double x = xmin + (xmax - xmin) * k / 4.0;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3g", x);
        os << "<text x=\"" << px(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << buf << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
       << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kPalette[i % (sizeof kPalette / sizeof kPalette[0])];
        const auto& s = series[i];
        if (lines && s.points.size() > 1) {
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
            for (auto [x, y] : s.points) os << px(x) << "," << py(y) << " ";
            os << "\"/>\n";
        }
        for (auto [x, y] : s.points)
            os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        const double ly = T + 16 * static_cast<double>(i);
        os << "<rect x=\"" << W - R + 12 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
        os << "<text x=\"" << W - R + 28 << "\" y=\"" << ly + 9 << "\">" << s.label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string train_label(const Record& r) {
    char buf[96];
    switch (r.kind) {
        case ExperimentKind::rotation: std::snprintf(buf, sizeof buf, "theta_max=%.3f", r.train_support.theta_max); break;
        case ExperimentKind::location: return geometry::to_string(r.train_support.location);
        default:
            std::snprintf(buf, sizeof buf, "s=[%.2f,%.2f]", r.train_support.scale_lo, r.train_support.scale_hi);
    }
    return buf;
}

// Mean success over targets per (train label, x) for binned records.
std::vector<Series> binned_series(const std::vector<const Record*>& rs) {
    std::map<std::string, std::map<double, std::pair<double, int>>> acc;
    std::vector<std::string> order;
    for (const auto* r : rs) {
        if (r->test_bin < 0 || r->status != "ok") continue;
        const auto label = train_label(*r);
        if (!acc.count(label)) order.push_back(label);
        auto& cell = acc[label][r->test_value];
        cell.first += r->success_rate;
        cell.second += 1;
    }
    std::vector<Series> out;
    for (const auto& label : order) {
        Series s{label, {}};
        for (const auto& [x, v] : acc[label]) s.points.emplace_back(x, v.first / v.second);
        out.push_back(std::move(s));
    }
    return out;
}

std::string location_grid(const std::vector<const Record*>& rs) {
    const char* names[3] = {"saliency_min", "saliency_max", "random"};
    double sum[3][3] = {}, cnt[3][3] = {};
    auto idx = [&](const std::string& s) {
        for (int i = 0; i < 3; ++i)
            if (s == names[i]) return i;
        return -1;
    };
    for (const auto* r : rs) {
        if (r->status != "ok") continue;
        const int i = idx(geometry::to_string(r->train_support.location));
        const int j = idx(r->extra.value("test_location", std::string()));
        if (i < 0 || j < 0) continue;
        sum[i][j] += r->success_rate;
        cnt[i][j] += 1;
    }
    std::ostringstream os;
    const int C = 120, L = 120, T = 60;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << L + 3 * C + 20 << "\" height=\"" << T + 3 * C + 40
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << L + 1.5 * C << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">location: train (rows) x test (columns)</text>\n";
    for (int j = 0; j < 3; ++j)
        os << "<text x=\"" << L + C * j + C / 2 << "\" y=\"" << T - 8 << "\" text-anchor=\"middle\">" << names[j] << "</text>\n";
    for (int i = 0; i < 3; ++i) {
        os << "<text x=\"" << L - 6 << "\" y=\"" << T + C * i + C / 2 << "\" text-anchor=\"end\">" << names[i] << "</text>\n";
        for (int j = 0; j < 3; ++j) {
            const double v = cnt[i][j] > 0 ? sum[i][j] / cnt[i][j] : 0.0;
            const int shade = 255 - static_cast<int>(v * 180);
            char buf[32];
            std::snprintf(buf, sizeof buf, cnt[i][j] > 0 ? "%.3f" : "n/a", v);
            os << "<rect x=\"" << L + C * j << "\" y=\"" << T + C * i << "\" width=\"" << C << "\" height=\"" << C
               << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"black\"/>\n";
            os << "<text x=\"" << L + C * j + C / 2 << "\" y=\"" << T + C * i + C / 2 + 4 << "\" text-anchor=\"middle\">"
               << buf << "</text>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace

ReportFormat parse_report_format(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    if (s == "svg") return ReportFormat::svg;
    throw ConfigError("unknown report format '" + s + "' (csv, json, svg)");
}

std::string records_csv(const std::vector<Record>& records) {
    std::ostringstream os;
    for (std::size_t c = 0; c < kNumColumns; ++c) os << (c ? "," : "") << kColumns[c];
    os << "\n";
    for (const auto& r : records) {
        std::string arts;
        for (std::size_t i = 0; i < r.artifacts.size(); ++i) arts += (i ? ";" : "") + r.artifacts[i];
        const std::vector<std::string> f = {quote(r.cell_id),
                                            to_string(r.kind),
                                            std::to_string(r.target),
                                            num(r.train_support.theta_max),
                                            num(r.train_support.scale_lo),
                                            num(r.train_support.scale_hi),
                                            geometry::to_string(r.train_support.location),
                                            std::to_string(r.train_support.fixed_row),
                                            std::to_string(r.train_support.fixed_col),
                                            quote(r.test_condition),
                                            num(r.test_value),
                                            std::to_string(r.test_bin),
                                            num(r.success_rate),
                                            std::to_string(r.trials),
                                            std::to_string(r.successes),
                                            num(r.ci_low),
                                            num(r.ci_high),
                                            num(r.wall_time),
                                            std::to_string(r.seed),
                                            quote(r.status),
                                            quote(r.error),
                                            quote(arts),
                                            quote(r.extra.dump())};
        for (std::size_t c = 0; c < f.size(); ++c) os << (c ? "," : "") << f[c];
        os << "\n";
    }
    return os.str();
}

std::vector<Record> parse_records_csv(const std::string& text) {
    const auto rows = split_csv(text);
    if (rows.empty()) throw FormatError("csv: missing header");
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
    for (const char* c : kColumns)
        if (!col.count(c)) throw FormatError(std::string("csv: missing column ") + c);
    std::vector<Record> out;
    for (std::size_t k = 1; k < rows.size(); ++k) {
        const auto& row = rows[k];
        if (row.size() != rows[0].size())
            throw FormatError("csv: row " + std::to_string(k) + " has " + std::to_string(row.size()) + " fields");
        auto get = [&](const char* c) -> const std::string& { return row[col.at(c)]; };
        Record r;
        r.cell_id = get("cell_id");
        r.kind = parse_kind(get("kind"));
        r.target = static_cast<int>(to_double(get("target"), "target"));
        r.train_support.theta_max = to_double(get("train_theta_max"), "train_theta_max");
        r.train_support.scale_lo = to_double(get("train_scale_lo"), "train_scale_lo");
        r.train_support.scale_hi = to_double(get("train_scale_hi"), "train_scale_hi");
        r.train_support.location = geometry::parse_location(get("train_location"));
        r.train_support.fixed_row = to_u64(get("fixed_row"), "fixed_row");
        r.train_support.fixed_col = to_u64(get("fixed_col"), "fixed_col");
        r.test_condition = get("test_condition");
        r.test_value = to_double(get("test_value"), "test_value");
        r.test_bin = static_cast<int>(to_double(get("test_bin"), "test_bin"));
        r.success_rate = to_double(get("success_rate"), "success_rate");
        r.trials = to_u64(get("trials"), "trials");
        r.successes = to_u64(get("successes"), "successes");
        r.ci_low = to_double(get("ci_low"), "ci_low");
        r.ci_high = to_double(get("ci_high"), "ci_high");
        r.wall_time = to_double(get("wall_time"), "wall_time");
        r.seed = to_u64(get("seed"), "seed");
        r.status = get("status");
        r.error = get("error");
        std::stringstream arts(get("artifacts"));
        for (std::string a; std::getline(arts, a, ';');)
            if (!a.empty()) r.artifacts.push_back(a);
        try {
            r.extra = nlohmann::json::parse(get("extra"));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("csv: bad extra column: ") + e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

nlohmann::json records_json(const std::vector<Record>& records) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : records) a.push_back(r.to_json());
    return a;
}

std::vector<Record> parse_records_json(const nlohmann::json& j) {
    if (!j.is_array()) throw FormatError("records json must be an array");
    std::vector<Record> out;
    for (const auto& r : j) out.push_back(Record::from_json(r));
    return out;
}

std::vector<std::pair<std::string, std::string>> records_svg(const std::vector<Record>& records) {
    std::map<ExperimentKind, std::vector<const Record*>> by_kind;
    for (const auto& r : records) by_kind[r.kind].push_back(&r);
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [kind, rs] : by_kind) {
        const auto name = to_string(kind);
        switch (kind) {
            case ExperimentKind::scale_up:
            case ExperimentKind::scale_down:
                out.emplace_back(name, svg_plot(name + ": success vs test scale", "test scale", "targeted success",
                                                binned_series(rs), true));
                break;
            case ExperimentKind::rotation:
                out.emplace_back(name, svg_plot(name + ": success vs test angle", "test angle (rad)",
                                                "targeted success", binned_series(rs), true));
                break;
            case ExperimentKind::location: out.emplace_back(name, location_grid(rs)); break;
            case ExperimentKind::transparency: {
                Series semi{"semi", {}}, control{"control", {}};
                for (const auto* r : rs) {
                    if (r->status != "ok") continue;
                    const double x = r->extra.value("image_relative_opacity", 0.0);
                    (r->test_condition == "semi" ? semi : control).points.emplace_back(x, r->success_rate);
                }
                out.emplace_back(name, svg_plot(name + ": success vs opacity", "image-relative opacity",
                                                "targeted success", {semi, control}, false));
                break;
            }
            case ExperimentKind::base: {
                Series s{"all", {}};
                for (const auto* r : rs)
                    if (r->status == "ok" && r->test_condition == "all") s.points.emplace_back(r->target, r->success_rate);
                out.emplace_back(name, svg_plot(name + ": success per target", "target class", "targeted success", {s},
                                                false));
                break;
            }
        }
    }
    return out;
}

std::vector<fs::path> emit_report(const std::vector<Record>& records, const std::vector<ReportFormat>& formats,
                                  const fs::path& dir) {
    if (records.empty()) throw ConfigError("no records to report");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create report directory " + dir.string() + ": " + ec.message());
    std::vector<fs::path> written;
    std::set<ReportFormat> seen;
    for (auto f : formats) {
        if (!seen.insert(f).second) continue;
        switch (f) {
            case ReportFormat::csv:
                written.push_back(dir / "records.csv");
                io::write_atomic(written.back(), records_csv(records));
                break;
            case ReportFormat::json:
                written.push_back(dir / "report.json");
                io::write_atomic(written.back(), records_json(records).dump(2) + "\n");
                break;
            case ReportFormat::svg:
                for (const auto& [name, svg] : records_svg(records)) {
                    written.push_back(dir / (name + ".svg"));
                    io::write_atomic(written.back(), svg);
                }
                break;
        }
    }
    return written;
}

}  // namespace patchforge::harness
