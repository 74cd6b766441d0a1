#pragma once

#include <torch/torch.h>

// Building blocks shared by the networks. Weights follow the equalized
// learning-rate convention: stored with unit variance and scaled by
// 1/sqrt(fan_in) (times an optional lr multiplier) at run time.
namespace xswap::layers {

struct EqualLinearImpl : torch::nn::Module {
  EqualLinearImpl(std::int64_t in, std::int64_t out, at::Generator& gen, double bias_init = 0.0,
                  double lr_mul = 1.0);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;
  double weight_gain, lr_mul;
};
TORCH_MODULE(EqualLinear);

struct EqualConv2dImpl : torch::nn::Module {
  EqualConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, at::Generator& gen,
                  std::int64_t stride = 1, bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;
  double weight_gain;
  std::int64_t stride, padding;
};
TORCH_MODULE(EqualConv2d);

inline torch::Tensor lrelu(const torch::Tensor& x, double slope = 0.2) {
  return torch::leaky_relu(x, slope);
}

// Parameters are set up with `gen`, so construction is deterministic.
void zero_(torch::nn::Module& module);

}  // namespace xswap::layers
