#include "xswap/layers.hpp"

#include <cmath>

namespace xswap::layers {

EqualLinearImpl::EqualLinearImpl(std::int64_t in, std::int64_t out, at::Generator& gen,
                                 double bias_init, double lr_mul_)
    : weight_gain(lr_mul_ / std::sqrt(static_cast<double>(in))), lr_mul(lr_mul_) {
  weight = register_parameter("weight", torch::randn({out, in}, gen) / lr_mul_);
  bias = register_parameter("bias", torch::full({out}, bias_init / lr_mul_));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  return torch::nn::functional::linear(x, weight * weight_gain, bias * lr_mul);
}

EqualConv2dImpl::EqualConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel,
                                 at::Generator& gen, std::int64_t stride_, bool with_bias)
    : weight_gain(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))),
      stride(stride_),
      padding(kernel / 2) {
  weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}, gen));
  if (with_bias) bias = register_parameter("bias", torch::zeros({out}));
}

torch::Tensor EqualConv2dImpl::forward(const torch::Tensor& x) {
  return torch::conv2d(x, weight * weight_gain, bias, stride, padding);
}

void zero_(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& p : module.parameters()) p.zero_();
}

}  // namespace xswap::layers
