#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xswap/config.hpp"
#include "xswap/evalkit.hpp"

// One function per pipeline stage. Each writes only under `out`, which must
// exist. Inputs may be given as the producing job's directory or as the
// artifact file inside it.
namespace xswap::jobs {

namespace fs = std::filesystem;

// Progress lines; null means silent.
using Log = std::function<void(const std::string&)>;

// Artifact names inside job directories.
inline constexpr const char* kCorpusDir = "corpus";
inline constexpr const char* kGeneratorFile = "generator.xswg";
inline constexpr const char* kIdentityFile = "identity.xswe";
inline constexpr const char* kLandmarkFile = "landmarks.xswe";
inline constexpr const char* kProbeFile = "probes.xswe";
inline constexpr const char* kTrainSplit = "train";
inline constexpr const char* kHeldOutSplit = "held_out";
inline constexpr const char* kInputsFile = "inputs.json";
inline constexpr const char* kRunConfigFile = "config.cfg";

void gen_faces(const RunConfig& cfg, const fs::path& out, const Log& log = {});
void pretrain_gan(const RunConfig& cfg, const fs::path& corpus, const fs::path& out, const Log& log = {});
void pretrain_id(const RunConfig& cfg, const fs::path& corpus, const fs::path& out, const Log& log = {});
void build_dataset(const RunConfig& cfg, const fs::path& generator, const fs::path& out, const Log& log = {});
void train(const RunConfig& cfg, const fs::path& generator, const fs::path& encoders, const fs::path& dataset,
           const fs::path& out, const Log& log = {});

struct EvalOutcome {
  std::int64_t step = 0;
  eval::SwapEval metrics;
  double fid_init = 0.0;
};
// Evaluates the latest checkpoint of a train run (every checkpoint with
// `all`). Appends to eval_report.tsv and transfer.tsv and writes one montage
// per evaluated checkpoint.
std::vector<EvalOutcome> evaluate(const RunConfig& cfg, const fs::path& run, const fs::path& out, bool all = false,
                                  const Log& log = {});
// FID between two directories of PNGs under the identity encoder's features.
double fid(const RunConfig& cfg, const fs::path& real_dir, const fs::path& fake_dir, const fs::path& encoders,
           const fs::path& out, const Log& log = {});
void swap(const fs::path& run, const fs::path& source, const fs::path& target, const fs::path& out);
void plot(const fs::path& run, const fs::path& out);

// Frozen parts and latest nets of a train run.
struct LoadedRun {
  RunConfig config;  // the run's own resolved config
  std::shared_ptr<FrozenParts> frozen;
  fs::path encoders, dataset;
  fs::path checkpoint;
};
LoadedRun load_run(const fs::path& run);

// PNG files of a directory in name order, stacked [N, 3, R, R].
torch::Tensor load_png_dir(const fs::path& dir);

}  // namespace xswap::jobs
