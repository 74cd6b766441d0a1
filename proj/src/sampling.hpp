#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "xswap/rng.hpp"

namespace xswap::detail {

inline torch::Tensor take(const torch::Tensor& all, const std::vector<std::int64_t>& idx) {
  return all.index_select(0, torch::tensor(idx, torch::kInt64));
}

// Epoch-style sampler over an index list, reshuffled with a seeded generator.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::int64_t> pool, std::uint64_t seed) : pool_(std::move(pool)), gen_(torch_generator(seed)) {}
  std::vector<std::int64_t> next(std::int64_t batch) {
    std::vector<std::int64_t> out;
    while (static_cast<std::int64_t>(out.size()) < batch) {
      if (pos_ >= order_.size()) {
        auto perm = torch::randperm(static_cast<std::int64_t>(pool_.size()), gen_, torch::kInt64);
        order_.assign(perm.data_ptr<std::int64_t>(), perm.data_ptr<std::int64_t>() + perm.numel());
        pos_ = 0;
      }
      out.push_back(pool_[static_cast<std::size_t>(order_[pos_++])]);
    }
    return out;
  }

 private:
  std::vector<std::int64_t> pool_, order_;
  std::size_t pos_ = 0;
  at::Generator gen_;
};

}  // namespace xswap::detail
