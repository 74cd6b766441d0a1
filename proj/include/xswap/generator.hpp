#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>

#include <torch/torch.h>

#include "xswap/checkpoint.hpp"
#include "xswap/image.hpp"

// Toy style-based generator: a 4-layer mapping network z -> w and a
// synthesis network driven by S = log2(resolution) * 2 - 2 style vectors,
// two per resolution block from 4x4 up to the output size.
namespace xswap {

inline constexpr std::int64_t kLatentDim = 512;

// Throws ConfigError unless resolution is a power of two >= 4.
std::int64_t num_styles(std::int64_t resolution);

// [batch, 512] i.i.d. standard normal latents.
torch::Tensor sample_z(std::uint64_t seed, std::int64_t batch);
torch::Tensor sample_z(at::Generator& gen, std::int64_t batch);

// Replicate w ([512] or [N, 512]) into extended styles [N, S, 512].
torch::Tensor broadcast(const torch::Tensor& w, std::int64_t resolution);

// Throws ShapeError unless styles is [N, num_styles(resolution), 512].
void check_styles(const torch::Tensor& styles, std::int64_t resolution);

struct GeneratorConfig {
  std::int64_t resolution = 64;
  int mapping_layers = 4;
  std::int64_t channel_base = 1024;  // channels at resolution r: min(channel_max, base / r)
  std::int64_t channel_max = 64;
  // Style injection: modulated convolution with weight demodulation, or
  // instance normalization followed by a style affine (AdaIN).
  bool adain = false;
  std::uint64_t seed = 0;  // parameter init and the fixed noise inputs

  std::int64_t channels_at(std::int64_t r) const;
};

struct GeneratorNet;

class Generator {
 public:
  Generator() = default;  // uninitialized; every network call throws StateError
  explicit Generator(const GeneratorConfig& config);

  static Generator load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool initialized() const { return net_ != nullptr; }
  const GeneratorConfig& config() const;
  std::int64_t resolution() const { return config().resolution; }
  std::int64_t num_styles() const { return xswap::num_styles(resolution()); }

  // z [N, 512] -> w [N, 512].
  torch::Tensor map(const torch::Tensor& z) const;
  // styles [N, S, 512] -> images [N, 3, R, R] in [-1, 1].
  torch::Tensor synthesize(const torch::Tensor& styles) const;
  // synthesize(broadcast(map(z))).
  torch::Tensor generate(const torch::Tensor& z) const;

  // Mean of map(z) over random latents; the projection starting point.
  torch::Tensor w_avg() const;
  void update_w_avg(std::int64_t samples, std::uint64_t seed);

  // Frozen generators reject parameter updates: their parameters have
  // requires_grad == false. Gradients still flow to inputs.
  void freeze();
  bool frozen() const;

  void to(torch::Dtype dtype);
  Generator clone() const;
  std::uint64_t fingerprint() const;
  std::vector<torch::Tensor> parameters() const;
  torch::nn::Module& module();
  const torch::nn::Module& module() const;

  void export_params(ParamBundle& bundle) const;
  static Generator from_bundle(const ParamBundle& bundle);

 private:
  const GeneratorNet& net() const;
  std::shared_ptr<GeneratorNet> net_;
};

}  // namespace xswap
