#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "xswap/error.hpp"
#include "xswap/layers.hpp"

namespace xswap {

// Convolutional trunk: stem, then per stage a stride-2 fused expand block
// (3x3 expand conv, 1x1 projection) followed by a residual fused block.
// The head either pools globally or flattens the final feature map.
struct ConvTrunk : torch::nn::Module {
  ConvTrunk(const std::vector<std::int64_t>& ch, std::int64_t expand, std::int64_t out_dim,
            std::int64_t flat_side, at::Generator& gen)
      : flat_side(flat_side) {
    if (ch.size() < 2) throw ConfigError("conv trunk needs a stem and at least one stage");
    stem = register_module("stem", layers::EqualConv2d(3, ch[0], 3, gen));
    for (std::size_t s = 1; s < ch.size(); ++s) {
      const auto tag = std::to_string(s);
      down_expand.push_back(register_module("s" + tag + "_dx", layers::EqualConv2d(ch[s - 1], ch[s - 1] * expand, 3, gen, 2)));
      down_project.push_back(register_module("s" + tag + "_dp", layers::EqualConv2d(ch[s - 1] * expand, ch[s], 1, gen)));
      res_expand.push_back(register_module("s" + tag + "_rx", layers::EqualConv2d(ch[s], ch[s] * expand, 3, gen)));
      res_project.push_back(register_module("s" + tag + "_rp", layers::EqualConv2d(ch[s] * expand, ch[s], 1, gen)));
      torch::NoGradGuard ng;
      res_project.back()->weight.mul_(0.1);
    }
    const auto feat = flat_side > 0 ? ch.back() * flat_side * flat_side : ch.back();
    head = register_module("head", layers::EqualLinear(feat, out_dim, gen));
  }

  torch::Tensor forward(const torch::Tensor& images) {
    auto x = torch::silu(stem->forward(images));
    for (std::size_t s = 0; s < down_expand.size(); ++s) {
      x = down_project[s]->forward(torch::silu(down_expand[s]->forward(x)));
      x = x + res_project[s]->forward(torch::silu(res_expand[s]->forward(x)));
    }
    if (flat_side > 0) {
      if (x.size(2) != flat_side || x.size(3) != flat_side) throw ShapeError("conv trunk: unexpected input size");
      return head->forward(x.flatten(1));
    }
    return head->forward(x.mean({2, 3}));
  }

  std::int64_t flat_side;
  layers::EqualConv2d stem{nullptr};
  std::vector<layers::EqualConv2d> down_expand, down_project, res_expand, res_project;
  layers::EqualLinear head{nullptr};
};

}  // namespace xswap
