#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "psgd/engine.hpp"
#include "psgd/timeline.hpp"
#include "psgd/transport.hpp"

namespace psgd {

enum class Backend { inproc, tcp };

struct BenchOptions {
  TrainConfig train;
  /// Run both patterns back to back on the same data and latency settings.
  bool paired = false;
  Backend backend = Backend::inproc;
  std::string hosts;  // tcp: host:port per rank; empty picks free localhost ports
  LatencyModel latency;
  std::size_t samples = 1024;             // synthetic dataset size
  std::optional<std::filesystem::path> data;  // CSV dataset instead of synthetic
  std::optional<std::filesystem::path> timeline;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> metrics;
  bool verify_oracle = false;

  // Set by the launcher on spawned tcp workers.
  int rank = -1;
  int listen_fd = -1;
  std::optional<std::filesystem::path> worker_dir;
  /// Executable spawned for tcp ranks 1..s-1; defaults to this process.
  std::filesystem::path worker_exe = "/proc/self/exe";

  /// Non-fatal notes from parsing, e.g. config-file values overridden by flags.
  std::vector<std::string> warnings;
};

/// Parses command-line flags, optionally merged with an INI/TOML file given
/// by --config. Flags win over file values; each overridden key adds a
/// warning. UsageError or ConfigError on bad input.
BenchOptions parse_config(int argc, const char* const* argv);

/// Flags that reproduce `options` (used to launch tcp workers).
std::vector<std::string> to_args(const BenchOptions& options);

struct PatternReport {
  Pattern pattern = Pattern::pipelined;
  RunMetrics metrics;
  Model model;                       // rank 0's final model
  std::vector<EngineStats> stats;    // per rank
  std::uint64_t dataset_hash = 0;
  double initial_loss = 0.0;         // full dataset, initial model
  double final_loss = 0.0;           // full dataset, final model
  bool ranks_agree = true;           // every rank ended with the same bits
  std::optional<bool> oracle_match;  // set when --verify-oracle
  std::int64_t wall_clock_ns = 0;    // slowest rank's training window

  bool verified() const { return ranks_agree && oracle_match.value_or(true); }
};

struct BenchReport {
  std::vector<PatternReport> runs;
  bool verified() const;
};

/// Runs the configured pattern(s), writes the requested artifacts, and
/// prints metrics as key=value lines to `out`.
BenchReport run_benchmark(const BenchOptions& options, std::ostream& out);

/// Entry point of a spawned tcp worker (options.rank > 0).
int run_worker(const BenchOptions& options);

/// Full CLI: returns the process exit code (0 ok, 1 usage, 2 verification
/// failure, 3 transport or runtime failure).
int bench_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace psgd
