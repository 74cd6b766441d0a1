#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "xswap/generator.hpp"
#include "xswap/rng.hpp"

// Swap dataset construction: generator samples paired with their extended
// latent codes, either known (fast mode) or recovered by projection.
namespace xswap {

inline constexpr std::string_view kDatasetMagic = "XSWD";
inline constexpr std::uint32_t kDatasetVersion = 1;

struct ProjectConfig {
  std::int64_t steps = 300;
  double lr = 0.05;
  double reg = 1e-3;  // pull toward the broadcast mean-w start
  std::int64_t batch = 32;
};

struct Projection {
  torch::Tensor styles;             // [N, S, 512], best iterate per image
  torch::Tensor best_objective;     // [N]
  // Best-so-far objective of image 0 after each step (length steps + 1).
  std::vector<double> trace;
};

// Optimizes an extended code per target image ([N, 3, R, R]) starting from
// broadcast(w_avg): pixel MSE + reg * mean squared deviation from the start.
// Throws NumericError naming the iterate if the objective goes non-finite.
Projection project_wplus(const Generator& gen, const torch::Tensor& targets, const ProjectConfig& cfg);

enum class DatasetMode { kFast, kInversion };

struct DatasetConfig {
  DatasetMode mode = DatasetMode::kFast;
  ProjectConfig projection;
  std::int64_t batch = 64;  // synthesis batch
};

struct SwapDataset {
  std::int64_t resolution = 0;
  std::uint64_t seed = 0;
  DatasetMode mode = DatasetMode::kFast;
  torch::Tensor latents;                 // [n, S, 512] float32
  torch::Tensor images;                  // [n, 3, R, R] uint8, PNG-exact
  std::vector<std::int64_t> record_ids;  // index of each record in the full build

  std::int64_t size() const { return static_cast<std::int64_t>(record_ids.size()); }
  // Dequantized [k, 3, R, R] float images in [-1, 1].
  torch::Tensor image_batch(const std::vector<std::int64_t>& idx) const;
  torch::Tensor latent_batch(const std::vector<std::int64_t>& idx) const;
  SwapDataset subset(const std::vector<std::int64_t>& idx) const;
};

// Record i uses z_i drawn from a stream derived from (seed, i).
torch::Tensor record_latent_z(std::uint64_t seed, std::int64_t index);

SwapDataset build_dataset(const Generator& gen, std::int64_t n, std::uint64_t seed, const DatasetConfig& cfg,
                          const std::function<void(std::int64_t)>& progress = {});

// Seeded shuffle, then the first round(n * train_fraction) records form the
// training side.
std::pair<SwapDataset, SwapDataset> split(const SwapDataset& ds, double train_fraction, std::uint64_t seed);
std::pair<std::int64_t, std::int64_t> split_sizes(std::int64_t n, double train_fraction);

struct PairSample {
  std::int64_t source = 0;
  std::int64_t target = 0;
  bool same = false;
};

PairSample sample_pair(const SwapDataset& ds, double p_same, Rng& rng);
std::vector<PairSample> sample_pairs(const SwapDataset& ds, double p_same, Rng& rng, std::int64_t count);

// Directory layout: manifest.tsv, latents.xswd, images/%06d.png.
void save_dataset(const SwapDataset& ds, const std::filesystem::path& dir);
SwapDataset load_dataset(const std::filesystem::path& dir);

// The latent file alone, for corruption handling.
std::string encode_latents(const torch::Tensor& latents);
torch::Tensor decode_latents(std::string_view bytes);

}  // namespace xswap
