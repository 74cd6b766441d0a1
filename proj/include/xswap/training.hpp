#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "xswap/encoders.hpp"
#include "xswap/generator.hpp"
#include "xswap/losses.hpp"
#include "xswap/mapper.hpp"
#include "xswap/pipeline.hpp"

// Swap training: alternating non-adversarial and adversarial steps over
// the attribute encoder and mapper, with the identity encoder, generator
// and landmark provider frozen. Plus swap inference.
namespace xswap {

struct TrainConfig {
  double lr_nonadv = 2e-5;
  double lr_adv = 6e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::int64_t batch = 16;
  std::int64_t steps = 20000;
  double p_same = 0.5;
  losses::LossWeights weights;
  std::uint64_t seed = 0;
  std::int64_t resolution = 64;

  std::int64_t checkpoint_every = 1000;
  double clip_norm = 10.0;          // <= 0 disables clipping
  bool adversarial = true;          // one adv step after every non-adv step
  bool adv_updates_encoder = false; // attribute encoder also takes the adversarial G gradient
  bool mapper_init_wavg = true;     // head bias starts at the generator's mean w
  double mapper_head_scale = 0.1;   // initial head weight scale when mapper_init_wavg is set
  bool per_row_heads = false;
  AttributeEncoderConfig attr;

  // Throws ConfigError on invalid values.
  void validate() const;
};

// Pretrained components that training never modifies.
struct FrozenParts {
  Generator generator;
  IdentityEncoder identity;
  Landmarks landmarks;  // must read pixels: outputs carry no metadata

  std::uint64_t generator_fingerprint() const { return generator.fingerprint(); }
  std::uint64_t identity_fingerprint() const { return identity.fingerprint(); }
};

// The trainable parameter sets.
struct SwapNets {
  AttributeEncoder attr;
  LatentMapper mapper{nullptr};
  WplusDiscriminator disc{nullptr};
};

// Inference: G(mapper([E_id(source), E_attr(target)])). Images [N, 3, R, R]
// (or unbatched) at the generator's resolution.
torch::Tensor swap(const FrozenParts& frozen, const SwapNets& nets, const torch::Tensor& source,
                   const torch::Tensor& target);
torch::Tensor swap_styles(const FrozenParts& frozen, const SwapNets& nets, const torch::Tensor& source,
                          const torch::Tensor& target);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::shared_ptr<const FrozenParts> frozen, SwapDataset train_set);

  // One Adam update of attribute encoder + mapper on the weighted sum of
  // identity, landmark and gated reconstruction losses.
  losses::LossReport nonadv_step(const std::vector<PairSample>& pairs);
  // Discriminator update (adv_d + R1 on reals), then mapper update on
  // lambda_adv * adv_g.
  losses::LossReport adv_step(const std::vector<PairSample>& pairs, const torch::Tensor& real_wplus);
  // Samples the pairs and real codes for the current step from streams
  // derived from (seed, step), runs both phases, and advances the counter.
  losses::LossReport step();

  std::int64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const SwapNets& nets() const { return nets_; }
  SwapNets& nets() { return nets_; }
  const FrozenParts& frozen() const { return *frozen_; }
  std::vector<PairSample> pairs_for_step(std::int64_t step) const;
  torch::Tensor real_wplus_for_step(std::int64_t step) const;

  // Checkpoint: trainable parameters, Adam moments, step counter and the
  // frozen fingerprints. Saving throws StateError if a frozen component
  // changed since construction.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  std::uint64_t start_generator_fingerprint() const { return gen_fp_; }
  std::uint64_t start_identity_fingerprint() const { return id_fp_; }

 private:
  std::vector<torch::Tensor> nonadv_params() const;
  torch::Tensor codes(const torch::Tensor& source, const torch::Tensor& target) const;

  TrainConfig cfg_;
  std::shared_ptr<const FrozenParts> frozen_;
  SwapDataset data_;
  SwapNets nets_;
  std::unique_ptr<torch::optim::Adam> opt_nonadv_, opt_d_, opt_g_;
  std::int64_t step_ = 0;
  std::uint64_t gen_fp_ = 0, id_fp_ = 0;
};

// Loads trainable nets from a swap checkpoint (for inference).
SwapNets load_swap_nets(const std::filesystem::path& path);
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step);
// Highest-step swap_step%08d.xswm in dir, or empty.
std::filesystem::path latest_checkpoint(const std::filesystem::path& dir);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::int64_t steps = 0;
  losses::LossReport last;
};

// Runs the schedule in out_dir: resumes from the latest checkpoint there,
// appends to train_log.tsv (rows past the resumed step are dropped first),
// checkpoints every checkpoint_every steps and at the end. A zero-step run
// writes the initialization as swap_step00000000.xswm.
TrainResult train(const TrainConfig& cfg, std::shared_ptr<const FrozenParts> frozen, const SwapDataset& train_set,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const losses::LossReport&)>& on_step = {});

}  // namespace xswap
