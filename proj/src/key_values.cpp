#include "sdelab/key_values.hpp"

#include "sdelab/types.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sdelab {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (t.empty() || ec != std::errc() || ptr != last) {
    throw Error("config", "key '" + key + "' expects a number, got '" + t + "'");
  }
  return v;
}

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("config", "line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw Error("config", "line " + std::to_string(lineno) + ": empty key");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValues::format() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void KeyValues::set(const std::string& key, double value) { values_[key] = format_double(value); }

void KeyValues::set(const std::string& key, long long value) { values_[key] = std::to_string(value); }

void KeyValues::set(const std::string& key, const std::vector<double>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ", ";
    s += format_double(values[i]);
  }
  values_[key] = s;
}

const std::string& KeyValues::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error("config", "missing required key '" + key + "'");
  return it->second;
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValues::get_double(const std::string& key) const { return parse_double(key, get(key)); }

double KeyValues::get_double_or(const std::string& key, double fallback) const {
  return contains(key) ? get_double(key) : fallback;
}

long long KeyValues::get_int(const std::string& key) const {
  const std::string t = trim(get(key));
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw Error("config", "key '" + key + "' expects an integer, got '" + t + "'");
  }
  return v;
}

long long KeyValues::get_int_or(const std::string& key, long long fallback) const {
  return contains(key) ? get_int(key) : fallback;
}

std::vector<double> KeyValues::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split(get(key), ',')) out.push_back(parse_double(key, item));
  return out;
}

std::vector<std::vector<double>> KeyValues::get_rows(const std::string& key) const {
  std::vector<std::vector<double>> rows;
  for (const auto& row : split(get(key), ';')) {
    std::vector<double> r;
    for (const auto& item : split(row, ',')) r.push_back(parse_double(key, item));
    rows.push_back(std::move(r));
  }
  return rows;
}

void KeyValues::merge(const KeyValues& overrides) {
  for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

}  // namespace sdelab
