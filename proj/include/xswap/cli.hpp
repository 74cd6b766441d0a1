#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

// Command-line front end: argument parsing and job dispatch.
namespace xswap::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct JobSpec {
  std::string subcommand;
  std::filesystem::path config;  // empty for subcommands that take none
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  int verbosity = 1;  // 0 quiet, 1 progress, 2 chatty
  int workers = 1;
  bool force = false;
  bool all = false;  // evaluate: every checkpoint
  // Named inputs (corpus, generator, encoders, dataset, run, source, target,
  // real, fake). Missing job-directory inputs default to the producing
  // subcommand's directory next to `out`.
  std::map<std::string, std::filesystem::path> inputs;

  bool help = false;
  std::string help_text;
};

const std::vector<std::string>& subcommands();

// Throws UsageError naming the offending flag or subcommand. `env_out` is
// the XSWAP_OUT value, if any.
JobSpec parse_args(const std::vector<std::string>& args, const std::optional<std::string>& env_out = std::nullopt);

// Runs one stage; returns the exit code. Errors go to `err`.
int dispatch(const JobSpec& spec, std::ostream& err);

// parse_args + dispatch with exit-code mapping; reads XSWAP_OUT.
int run(int argc, char** argv);

}  // namespace xswap::cli
