#include "taskdiff/config.hpp"

#include <fstream>
#include <sstream>

#include "taskdiff/common.hpp"

namespace td {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::pair<std::string, std::string> split_pair(const std::string& line,
                                               const std::string& where) {
  size_t eq = line.find('=');
  TD_CHECK(eq != std::string::npos, "bad_config",
           "config: expected key=value in " + where + ": '" + line + "'");
  std::string key = trim(line.substr(0, eq));
  std::string value = trim(line.substr(eq + 1));
  TD_CHECK(!key.empty(), "bad_config", "config: empty key in " + where);
  return {key, value};
}

}  // namespace

std::string RunConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

int RunConfig::get_int(const std::string& key, int fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    int v = std::stoi(it->second, &used);
    TD_CHECK(used == it->second.size(), "bad_config", "");
    return v;
  } catch (...) {
    fail("bad_config", "config: '" + key + "' is not an integer: " + it->second);
  }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    TD_CHECK(used == it->second.size(), "bad_config", "");
    return v;
  } catch (...) {
    fail("bad_config", "config: '" + key + "' is not a number: " + it->second);
  }
}

uint64_t RunConfig::get_u64(const std::string& key, uint64_t fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    uint64_t v = std::stoull(it->second, &used);
    TD_CHECK(used == it->second.size(), "bad_config", "");
    return v;
  } catch (...) {
    fail("bad_config", "config: '" + key + "' is not an unsigned integer: " + it->second);
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail("bad_config", "config: '" + key + "' is not a boolean: " + v);
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto [key, value] = split_pair(line, "line " + std::to_string(lineno));
    cfg.kv[key] = value;
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  TD_CHECK(f.good(), "io_error", "config: cannot open " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_run_config(buf.str());
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& pairs) {
  for (const std::string& p : pairs) {
    auto [key, value] = split_pair(p, "override");
    cfg.kv[key] = value;
  }
}

std::string format_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : cfg.kv) out += key + " = " + value + "\n";
  return out;
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream f(path, std::ios::trunc);
  TD_CHECK(f.good(), "io_error", "config: cannot open " + path);
  f << format_run_config(cfg);
  TD_CHECK(f.good(), "io_error", "config: write failed for " + path);
}

}  // namespace td
