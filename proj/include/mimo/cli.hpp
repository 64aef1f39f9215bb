#pragma once

#include "mimo/arch.hpp"
#include "mimo/baselines.hpp"
#include "mimo/checkpoint.hpp"
#include "mimo/trainer.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace mimo::cli {

enum ExitCode { kOk = 0, kRuntimeFailure = 1, kUsageError = 2 };

// Everything `train` needs besides the data. Parsed from JSON with unknown
// keys rejected; missing keys keep their defaults.
struct RunConfig {
  ModelKind kind = ModelKind::mimo;
  ArchConfig arch;
  TrainConfig train;
  DropoutConfig dropout;
  EnsembleConfig ensemble = EnsembleConfig::with_consecutive_seeds(5, 0);

  void validate() const;  // throws ConfigError
};

RunConfig parse_run_config(const std::string& json_text);  // throws ConfigError
std::string to_json_text(const RunConfig& cfg);

// Runs one subcommand (args excludes the program name) and returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

}  // namespace mimo::cli
