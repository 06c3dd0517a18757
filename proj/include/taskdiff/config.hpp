#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace td {

// Flat key=value run configuration. Files use one `key = value` pair per
// line with '#' comments; command-line overrides use the same `key=value`
// syntax and win over file values. Every run writes its fully resolved
// config next to its outputs so artifacts can be regenerated from it.
struct RunConfig {
  std::map<std::string, std::string> kv;

  bool has(const std::string& key) const { return kv.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  void set(const std::string& key, const std::string& value) { kv[key] = value; }
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
// Applies `key=value` strings in order; malformed entries error.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& pairs);
// One sorted `key = value` line per entry.
std::string format_run_config(const RunConfig& cfg);
void save_run_config(const std::string& path, const RunConfig& cfg);

}  // namespace td
