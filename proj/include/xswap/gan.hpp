#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>

#include <torch/torch.h>

#include "xswap/generator.hpp"
#include "xswap/layers.hpp"
#include "xswap/procfaces.hpp"

// Toy GAN pretraining of the generator on the procedural corpus:
// non-saturating loss, lazy R1 on reals, generator EMA.
namespace xswap {

struct ImageDiscriminatorImpl : torch::nn::Module {
  ImageDiscriminatorImpl(std::int64_t resolution, std::int64_t channel_base, std::int64_t channel_max,
                         std::uint64_t seed);
  // [N, 3, R, R] -> [N] logits.
  torch::Tensor forward(const torch::Tensor& images);

  std::int64_t resolution;
  layers::EqualConv2d from_rgb{nullptr}, final_conv{nullptr};
  std::vector<layers::EqualConv2d> conv1, conv2, skip;
  layers::EqualLinear fc{nullptr}, out{nullptr};
};
TORCH_MODULE(ImageDiscriminator);

struct GanConfig {
  GeneratorConfig generator;
  std::int64_t steps = 4000;
  std::int64_t batch = 16;
  double lr = 2e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double r1_gamma = 1.0;
  std::int64_t r1_every = 16;
  double ema_beta = 0.995;
  std::int64_t checkpoint_every = 500;
  std::uint64_t seed = 0;
};

struct GanLogRow {
  std::int64_t step;
  double d_loss, g_loss, r1;
};

// Trainer state: live and EMA generators, discriminator, both optimizers.
// Step t draws its latents and real batch from streams derived from
// (seed, t), so a resumed run follows the unbroken trajectory exactly.
class GanTrainer {
 public:
  GanTrainer(const procfaces::Corpus& corpus, const GanConfig& cfg);

  GanLogRow step();
  std::int64_t steps_done() const { return step_; }
  bool finished() const { return step_ >= cfg_.steps; }

  // The EMA generator, which is what pretraining returns.
  const Generator& ema() const { return ema_; }
  const Generator& live() const { return g_; }

  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  GanConfig cfg_;
  torch::Tensor reals_;
  Generator g_, ema_;
  ImageDiscriminator d_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  std::int64_t step_ = 0;
};

// Runs (or resumes) pretraining. With a work directory, state snapshots
// gan_state_%08d.xswg are written every checkpoint_every steps and the
// latest one is resumed from. The returned generator is the EMA copy with
// a refreshed w_avg; it is not frozen.
Generator pretrain_gan(const procfaces::Corpus& corpus, const GanConfig& cfg,
                       const std::filesystem::path& work_dir = {},
                       const std::function<void(const GanLogRow&)>& log = {});

}  // namespace xswap
