#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "xswap/checkpoint.hpp"

// Optimizer helpers shared by the training loops.
namespace xswap::optim {

void set_lr(torch::optim::Adam& opt, double lr);

// Cosine decay from lr to floor * lr over `steps`.
double cosine_lr(double lr, std::int64_t step, std::int64_t steps, double floor = 0.05);

// Adam moments and step counts, per parameter in group order. Parameters
// that have not been stepped yet are stored with step 0 and no moments.
void export_adam(const torch::optim::Adam& opt, const std::string& prefix, ParamBundle& out);
void import_adam(torch::optim::Adam& opt, const std::string& prefix, const ParamBundle& in);

// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping. max_norm <= 0 only measures.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);

// Exponential moving average of `src` into `dst` (same parameter order).
void ema_update(const std::vector<torch::Tensor>& dst, const std::vector<torch::Tensor>& src, double beta);

}  // namespace xswap::optim
