#pragma once

#include "sdelab/analysis.hpp"
#include "sdelab/key_values.hpp"
#include "sdelab/types.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace sdelab {

enum class ValueType { Real, Integer, Text, RealList, Rows };

struct ConfigKey {
  std::string name;
  ValueType type = ValueType::Real;
  std::string fallback;  // empty: no default (optional or required per command)
  std::string help;
};

// Every key accepted by the command-line tool.
const std::vector<ConfigKey>& config_schema();

std::size_t edit_distance(const std::string& a, const std::string& b);
// Closest schema key to name.
std::string nearest_key(const std::string& name);

// Defaults, then the file (if any), then the inline overrides; unknown keys and
// values of the wrong type are rejected.
KeyValues resolve_config(const std::string& path, const std::vector<std::string>& overrides);
// Only the keys that were given explicitly (file plus overrides), validated.
KeyValues explicit_config(const std::string& path, const std::vector<std::string>& overrides);
void validate_config(const KeyValues& kv);

void write_points_csv(const std::string& path, const Points& x);
Points read_points_csv(const std::string& path);

// Outputs are written to hidden temporary files in the output directory and
// renamed into place by commit(); uncommitted files are removed on destruction.
class OutputStage {
 public:
  explicit OutputStage(std::string dir);
  ~OutputStage();
  OutputStage(const OutputStage&) = delete;
  OutputStage& operator=(const OutputStage&) = delete;

  // Temporary path to write the named output to.
  std::string stage(const std::string& name);
  void commit();
  const std::string& dir() const { return dir_; }
  const std::vector<std::string>& names() const { return names_; }
  std::string final_path(const std::string& name) const;

 private:
  std::string dir_;
  std::vector<std::string> names_;
  std::vector<std::string> temps_;
  bool committed_ = false;
};

// One tidy CSV (x, y, y_err, series) per metric of the report; returns the names.
std::vector<std::string> emit_plot_data(const ExperimentReport& report, OutputStage& stage);

struct RunManifest {
  std::string command;
  KeyValues config;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string started;
  std::string finished;
  std::vector<std::pair<std::string, std::string>> outputs;  // name, content hash
  std::string to_json() const;
};

std::string config_hash(const std::string& command, const KeyValues& config);

// Entry point of the command-line tool; returns the process exit code.
int cli_main(int argc, char** argv);

}  // namespace sdelab
