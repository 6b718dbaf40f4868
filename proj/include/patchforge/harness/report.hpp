#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "patchforge/harness/harness.hpp"

namespace patchforge::harness {

enum class ReportFormat { csv, json, svg };

ReportFormat parse_report_format(const std::string& s);

// Writes records.csv / records.json / <kind>.svg under dir and returns the
// paths. Output bytes depend only on the records.
std::vector<fs::path> emit_report(const std::vector<Record>& records, const std::vector<ReportFormat>& formats,
                                  const fs::path& dir);

std::string records_csv(const std::vector<Record>& records);
std::vector<Record> parse_records_csv(const std::string& text);

nlohmann::json records_json(const std::vector<Record>& records);
std::vector<Record> parse_records_json(const nlohmann::json& j);

// One SVG per experiment kind present in the records.
std::vector<std::pair<std::string, std::string>> records_svg(const std::vector<Record>& records);

}  // namespace patchforge::harness
