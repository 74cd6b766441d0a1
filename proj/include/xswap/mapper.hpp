#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "xswap/checkpoint.hpp"
#include "xswap/layers.hpp"

// Latent mapper from the concatenated identity/attribute code to extended
// styles, and the discriminator that judges those styles.
namespace xswap {

inline constexpr std::int64_t kCodeDim = 2304;

// [N, 512] + [N, 1792] -> [N, 2304] (unbatched inputs give [1, 2304]).
torch::Tensor concat_codes(const torch::Tensor& id, const torch::Tensor& attr);

struct MapperConfig {
  std::int64_t resolution = 64;
  // One linear head per style row instead of a single joint head.
  bool per_row_heads = false;
  std::uint64_t seed = 0;
};

struct LatentMapperImpl : torch::nn::Module {
  explicit LatentMapperImpl(const MapperConfig& cfg);

  // [N, 2304] -> [N, S, 512].
  torch::Tensor forward(const torch::Tensor& code);
  // Start every output row at `w` ([512]) by moving it into the head bias.
  void set_output_bias(const torch::Tensor& w);

  MapperConfig config;
  std::int64_t styles;
  layers::EqualLinear fc1{nullptr}, fc2{nullptr}, fc3{nullptr}, head{nullptr};
  std::vector<layers::EqualLinear> row_heads;
};
TORCH_MODULE(LatentMapper);

struct WplusDiscriminatorImpl : torch::nn::Module {
  WplusDiscriminatorImpl(std::int64_t resolution, std::uint64_t seed);

  // [N, S, 512] -> [N] logits. Throws ShapeError on a style-shape mismatch.
  torch::Tensor forward(const torch::Tensor& styles);

  std::int64_t resolution, styles;
  layers::EqualLinear fc1{nullptr}, fc2{nullptr}, out{nullptr};
};
TORCH_MODULE(WplusDiscriminator);

void export_mapper(const LatentMapper& m, ParamBundle& out, const std::string& prefix = "map.");
LatentMapper import_mapper(const ParamBundle& in, const std::string& prefix = "map.");
void export_discriminator(const WplusDiscriminator& d, ParamBundle& out, const std::string& prefix = "dw.");
WplusDiscriminator import_discriminator(const ParamBundle& in, const std::string& prefix = "dw.");

}  // namespace xswap
