#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace bracket::cli {

// Flat key=value configuration: defaults, then config file, then flag
// overrides. Unknown keys are rejected with the key name.
struct RunConfig {
  std::string command;
  std::map<std::string, std::string> values;

  const std::string& get(const std::string& key) const;
  long get_long(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
};

// args excludes the program name: {command, flags...}.
RunConfig parse_config(const std::vector<std::string>& args);

// Returns the process exit code: 0 success, 2 usage error, 3 numerical
// failure.
int run(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace bracket::cli
