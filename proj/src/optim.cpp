#include "xswap/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "xswap/error.hpp"

namespace xswap::optim {

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

double cosine_lr(double lr, std::int64_t step, std::int64_t steps, double floor) {
  if (steps <= 1) return lr;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(steps - 1), 0.0, 1.0);
  return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

void export_adam(const torch::optim::Adam& opt, const std::string& prefix, ParamBundle& out) {
  std::size_t k = 0;
  for (const auto& g : opt.param_groups())
    for (const auto& p : g.params()) {
      const auto key = prefix + std::to_string(k++);
      auto it = opt.state().find(p.unsafeGetTensorImpl());
      if (it == opt.state().end()) {
        out.add(key + ".step", pack_u64(0));
        continue;
      }
      const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
      out.add(key + ".step", pack_u64(static_cast<std::uint64_t>(st.step())));
      out.add(key + ".m", st.exp_avg());
      out.add(key + ".v", st.exp_avg_sq());
    }
}

void import_adam(torch::optim::Adam& opt, const std::string& prefix, const ParamBundle& in) {
  std::size_t k = 0;
  for (auto& g : opt.param_groups())
    for (auto& p : g.params()) {
      const auto key = prefix + std::to_string(k++);
      const auto step = static_cast<std::int64_t>(unpack_u64(in.get(key + ".step")));
      auto impl = p.unsafeGetTensorImpl();
      opt.state().erase(impl);
      if (step == 0) continue;
      const auto& m = in.get(key + ".m");
      const auto& v = in.get(key + ".v");
      if (m.sizes() != p.sizes() || v.sizes() != p.sizes())
        throw ShapeError("optimizer state shape mismatch for '" + key + "'");
      auto st = std::make_unique<torch::optim::AdamParamState>();
      st->step(step);
      st->exp_avg(m.to(p.dtype()).clone());
      st->exp_avg_sq(v.to(p.dtype()).clone());
      opt.state()[impl] = std::move(st);
    }
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
  torch::NoGradGuard ng;
  double total = 0.0;
  for (const auto& p : params)
    if (p.grad().defined()) total += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (const auto& p : params)
      if (p.grad().defined()) p.grad().mul_(scale);
  }
  return norm;
}

void ema_update(const std::vector<torch::Tensor>& dst, const std::vector<torch::Tensor>& src, double beta) {
  if (dst.size() != src.size()) throw ShapeError("ema_update: parameter count mismatch");
  torch::NoGradGuard ng;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].lerp_(src[i], 1.0 - beta);
}

}  // namespace xswap::optim
