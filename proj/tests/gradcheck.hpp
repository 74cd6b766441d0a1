#pragma once

// Central finite-difference oracle for autograd gradients. Test-only; it
// evaluates the function as a black box and never touches autograd itself.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace xswap::testing {

struct GradCheckResult {
  double relative_error = 0.0;  // ||g_autograd - g_fd|| / ||g_fd||
  double fd_norm = 0.0;
  std::int64_t coords = 0;
};

// Compares d f / d x (f returns a scalar) against central differences on
// up to `max_coords` coordinates chosen deterministically from `seed`.
inline GradCheckResult grad_check(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                  const torch::Tensor& x0, std::int64_t max_coords = 64,
                                  double h = 1e-6, std::uint64_t seed = 0) {
  TORCH_CHECK(x0.scalar_type() == torch::kFloat64, "grad_check runs in 64-bit");
  auto x = x0.detach().clone().requires_grad_(true);
  auto y = f(x);
  torch::Tensor g;
  // A constant output carries no graph at all.
  if (y.requires_grad()) g = torch::autograd::grad({y}, {x}, {}, false, false, true)[0];
  if (!g.defined()) g = torch::zeros_like(x);
  g = g.flatten();

  const auto n = x0.numel();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  if (n > max_coords) {
    auto gen = at::detail::createCPUGenerator(seed);
    auto perm = torch::randperm(n, gen, torch::kInt64);
    idx.assign(perm.data_ptr<std::int64_t>(), perm.data_ptr<std::int64_t>() + max_coords);
  }

  // Grad mode stays on: some losses (R1) differentiate internally.
  auto base = x0.detach().clone().flatten();
  double diff2 = 0, fd2 = 0;
  for (auto i : idx) {
    auto xp = base.clone(), xm = base.clone();
    xp[i] += h;
    xm[i] -= h;
    const double fp = f(xp.view(x0.sizes())).item<double>();  // detached inputs, no graph kept
    const double fm = f(xm.view(x0.sizes())).item<double>();
    const double fd = (fp - fm) / (2 * h);
    const double ad = g[i].item<double>();
    diff2 += (ad - fd) * (ad - fd);
    fd2 += fd * fd;
  }
  GradCheckResult r;
  r.fd_norm = std::sqrt(fd2);
  r.relative_error = std::sqrt(diff2) / std::max(r.fd_norm, 1e-12);
  r.coords = static_cast<std::int64_t>(idx.size());
  return r;
}

// Same check for the gradient with respect to a module parameter tensor.
// `param` is perturbed in place and restored afterwards.
inline GradCheckResult param_grad_check(const std::function<torch::Tensor()>& f, torch::Tensor param,
                                        std::int64_t max_coords = 32, double h = 1e-6,
                                        std::uint64_t seed = 0) {
  for (auto& p : std::vector<torch::Tensor>{param})
    if (p.grad().defined()) p.mutable_grad().zero_();
  auto y = f();
  auto g = torch::autograd::grad({y}, {param}, {}, false, false, true)[0];
  if (!g.defined()) g = torch::zeros_like(param);
  g = g.flatten();
  const auto n = param.numel();
  std::vector<std::int64_t> idx;
  auto gen = at::detail::createCPUGenerator(seed);
  auto perm = torch::randperm(n, gen, torch::kInt64);
  for (std::int64_t k = 0; k < std::min(n, max_coords); ++k) idx.push_back(perm[k].item<std::int64_t>());

  auto flat = param.detach().view({-1});
  double diff2 = 0, fd2 = 0;
  for (auto i : idx) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double fp = f().item<double>();
    flat[i] = orig - h;
    const double fm = f().item<double>();
    flat[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    const double ad = g[i].item<double>();
    diff2 += (ad - fd) * (ad - fd);
    fd2 += fd * fd;
  }
  GradCheckResult r;
  r.fd_norm = std::sqrt(fd2);
  r.relative_error = std::sqrt(diff2) / std::max(r.fd_norm, 1e-12);
  r.coords = static_cast<std::int64_t>(idx.size());
  return r;
}

}  // namespace xswap::testing
