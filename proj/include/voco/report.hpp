#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "voco/common.hpp"

namespace voco {

using Json = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;

// Report skeleton with stable key order. Volatile fields (wall clock,
// timestamps) live only under the keys named here so golden comparisons can
// drop them.
inline Json make_report(const std::string& command,
                        const std::map<std::string, std::string>& config_snapshot) {
  Json report;
  report["schema_version"] = kReportSchemaVersion;
  report["command"] = command;
  report["config"] = Json::object();
  for (const auto& [k, v] : config_snapshot) report["config"][k] = v;
  report["metrics"] = Json::object();
  report["rows"] = Json::array();
  report["artifacts"] = Json::array();
  report["wall_clock_s"] = 0.0;
  return report;
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open report file for writing: " + path.string());
  out << j.dump(2) << "\n";
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open report file: " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("invalid JSON in " + path.string() + ": " + e.what(), 0);
  }
}

}  // namespace voco
