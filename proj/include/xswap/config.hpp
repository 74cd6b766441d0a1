#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xswap/encoders.hpp"
#include "xswap/evalkit.hpp"
#include "xswap/gan.hpp"
#include "xswap/pipeline.hpp"
#include "xswap/training.hpp"

// The single run configuration shared by every pipeline stage.
//
// Text format: one `section.key = value` per line, `#` starts a comment,
// blank lines ignored. Unknown keys, malformed lines and bad values raise
// ConfigError with the line number.
namespace xswap {

struct CorpusConfig {
  std::int64_t identities = 10;
  std::int64_t per_identity = 200;
  std::int64_t resolution = 64;
};

struct DatasetStageConfig {
  std::int64_t records = 8000;
  double train_fraction = 0.8;
  DatasetConfig build;
};

struct EvalStageConfig {
  std::int64_t pairs = 1000;
  std::int64_t batch = 50;
};

struct RunConfig {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  GanConfig gan;
  IdPretrainConfig id;
  eval::ProbeConfig probe;
  DatasetStageConfig dataset;
  TrainConfig train;
  EvalStageConfig eval;

  // Stage seeds are derived from `seed`; see the definition for the tags.
  std::uint64_t stage_seed(std::string_view stage) const;
  // Copies the resolution and stage seeds into the nested configs.
  RunConfig resolved() const;
  void validate() const;
};

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
// Every key with its current value, parseable by parse_config.
std::string format_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace xswap
