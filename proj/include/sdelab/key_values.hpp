#pragma once

#include <map>
#include <string>
#include <vector>

namespace sdelab {

// Flat `key = value` text format shared by model, target and run configs.
// Blank lines and text after '#' are ignored. Lists are comma separated,
// nested lists (e.g. mixture means) separate rows with ';'.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::string& path);

  std::string format() const;

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, const std::vector<double>& values);
  void erase(const std::string& key) { values_.erase(key); }

  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int_or(const std::string& key, long long fallback) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::vector<double>> get_rows(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  void merge(const KeyValues& overrides);

 private:
  std::map<std::string, std::string> values_;
};

std::string format_double(double v);
double parse_double(const std::string& key, const std::string& text);

}  // namespace sdelab
