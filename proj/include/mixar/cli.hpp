#pragma once

#include "mixar/io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mixar::cli {

/// Exit codes returned by run().
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kDependency = 3, kNumerical = 4 };

/// Built-in defaults of a subcommand (nested keys, dashes as in the flags).
io::Json default_config(const std::string& command);

/// Merges `overlay` into `base`. Every key of `overlay` must exist in `base`
/// with a compatible type; unknown keys throw ConfigError.
void merge_config(io::Json& base, const io::Json& overlay, const std::string& where = "");

/// Sets a dotted key ("ti-mix.lambda-start") from its textual value, parsed
/// according to the type already stored there.
void set_config_value(io::Json& cfg, const std::string& dotted, const std::string& text);

/// Directory holding all runs: `--runs-root`, else $MIXAR_RUNS_ROOT, else ./runs.
std::filesystem::path runs_root(const std::string& flag);

/// Entry point shared by the `mixar` tool and the tests. Errors are reported
/// on stderr as a single line `error[<category>]: <message>`.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

/// Allocator settings suited to the training loops (glibc only).
void tune_allocator();

}  // namespace mixar::cli
