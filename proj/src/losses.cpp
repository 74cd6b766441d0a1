#include "xswap/losses.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xswap/error.hpp"

namespace xswap::losses {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  for (double v : {lambda_id, lambda_lnd, lambda_rec, lambda_adv, r1_gamma})
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and nonnegative");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
}

namespace {

void require_nonempty(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.numel() == 0) throw ArgumentError(std::string(what) + ": empty batch");
}

torch::Tensor batched_image(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

torch::Tensor adv_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  require_nonempty(real_logits, "adv_d_loss");
  require_nonempty(fake_logits, "adv_d_loss");
  // log(1 - sigmoid(f)) == logsigmoid(-f), stable for large |f|.
  return -0.5 * F::logsigmoid(real_logits).mean() - 0.5 * F::logsigmoid(-fake_logits).mean();
}

torch::Tensor adv_g_loss(const torch::Tensor& fake_logits, bool saturating) {
  require_nonempty(fake_logits, "adv_g_loss");
  if (saturating) return 0.5 * F::logsigmoid(-fake_logits).mean();
  return -F::logsigmoid(fake_logits).mean();
}

torch::Tensor r1_penalty(const Critic& critic, const torch::Tensor& real_batch, double gamma) {
  require_nonempty(real_batch, "r1_penalty");
  auto zero = torch::zeros({}, real_batch.options().requires_grad(false));
  if (gamma == 0.0) return zero;
  auto x = real_batch.detach().requires_grad_(true);
  auto logits = critic(x);
  if (!logits.requires_grad()) return zero;
  auto grads = torch::autograd::grad({logits.sum()}, {x}, {}, /*retain_graph=*/true,
                                     /*create_graph=*/true, /*allow_unused=*/true);
  if (!grads[0].defined()) return zero;
  auto penalty = 0.5 * gamma * grads[0].pow(2).flatten(1).sum(1).mean();
  if (!torch::isfinite(penalty).item<bool>()) throw NumericError("r1_penalty: non-finite gradient");
  return penalty;
}

torch::Tensor id_loss(const torch::Tensor& src_emb, const torch::Tensor& out_emb) {
  require_same_shape(src_emb, out_emb, "id_loss");
  auto a = src_emb.dim() == 1 ? src_emb.unsqueeze(0) : src_emb;
  auto b = out_emb.dim() == 1 ? out_emb.unsqueeze(0) : out_emb;
  auto na = a.norm(2, 1), nb = b.norm(2, 1);
  if ((na == 0).any().item<bool>() || (nb == 0).any().item<bool>())
    throw ArgumentError("id_loss: zero-norm embedding");
  auto cos = (a * b).sum(1) / (na * nb);
  return (1.0 - cos).mean();
}

torch::Tensor landmark_loss(const torch::Tensor& target, const torch::Tensor& out) {
  require_same_shape(target, out, "landmark_loss");
  auto t = target.dim() == 2 ? target.unsqueeze(0) : target;
  auto o = out.dim() == 2 ? out.unsqueeze(0) : out;
  if (t.dim() != 3 || t.size(1) != 68 || t.size(2) != 2)
    throw ShapeError("landmark_loss expects [68, 2] or [N, 68, 2]");
  return (t - o).flatten(1).norm(2, 1).mean();
}

const std::vector<double>& ms_ssim_base_weights() {
  static const std::vector<double> w{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return w;
}

std::vector<double> ms_ssim_weights(int scales) {
  const auto& base = ms_ssim_base_weights();
  if (scales < 1 || scales > static_cast<int>(base.size()))
    throw ConfigError("MS-SSIM scale count must be in [1, 5]");
  std::vector<double> w(base.begin(), base.begin() + scales);
  double sum = 0;
  for (double v : w) sum += v;
  for (double& v : w) v /= sum;
  return w;
}

int max_scales(std::int64_t min_side, const SsimOptions& opt) {
  int s = 0;
  while (s < 5 && min_side >= opt.window * (std::int64_t{1} << s)) ++s;
  return s;
}

namespace {

torch::Tensor gaussian_window(const SsimOptions& opt, const torch::TensorOptions& to) {
  auto coords = torch::arange(opt.window, to) - static_cast<double>(opt.window / 2);
  auto g = torch::exp(-(coords * coords) / (2.0 * opt.sigma * opt.sigma));
  return g / g.sum();
}

// Separable valid-mode Gaussian filter applied per channel.
torch::Tensor blur(const torch::Tensor& x, const torch::Tensor& g) {
  const auto c = x.size(1);
  auto gh = g.view({1, 1, 1, -1}).expand({c, 1, 1, g.size(0)});
  auto gv = g.view({1, 1, -1, 1}).expand({c, 1, g.size(0), 1});
  const std::vector<std::int64_t> one{1, 1}, none{0, 0};
  return torch::conv2d(torch::conv2d(x, gh, {}, one, none, one, c), gv, {}, one, none, one, c);
}

}  // namespace

torch::Tensor ms_ssim_per_image(const torch::Tensor& x_in, const torch::Tensor& y_in, int scales,
                                const SsimOptions& opt) {
  require_same_shape(x_in, y_in, "ms_ssim");
  auto x = batched_image(x_in) + 1.0;
  auto y = batched_image(y_in) + 1.0;
  if (x.dim() != 4) throw ShapeError("ms_ssim expects [3, H, W] or [N, 3, H, W]");
  const auto min_side = std::min(x.size(2), x.size(3));
  if (scales < 1 || min_side < opt.window * (std::int64_t{1} << (scales - 1)))
    throw ConfigError("image of side " + std::to_string(min_side) + " too small for " +
                      std::to_string(scales) + " MS-SSIM scales");
  const auto weights = ms_ssim_weights(scales);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2);
  const double c2 = std::pow(opt.k2 * opt.data_range, 2);
  const auto g = gaussian_window(opt, x.options().requires_grad(false));

  torch::Tensor value;  // [N, C]
  for (int s = 0; s < scales; ++s) {
    auto mu_x = blur(x, g), mu_y = blur(y, g);
    auto sxx = blur(x * x, g) - mu_x * mu_x;
    auto syy = blur(y * y, g) - mu_y * mu_y;
    auto sxy = blur(x * y, g) - mu_x * mu_y;
    auto cs_map = (2.0 * sxy + c2) / (sxx + syy + c2);
    torch::Tensor term;
    if (s + 1 < scales) {
      term = cs_map.mean({2, 3});
    } else {
      auto lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1);
      term = (lum * cs_map).mean({2, 3});
    }
    // Negative structure correlation would make the fractional power undefined.
    term = term.clamp_min(1e-6).pow(weights[s]);
    value = value.defined() ? value * term : term;
    if (s + 1 < scales) {
      const std::vector<std::int64_t> pad{x.size(2) % 2, x.size(3) % 2};
      x = torch::avg_pool2d(x, 2, 2, pad);
      y = torch::avg_pool2d(y, 2, 2, pad);
    }
  }
  return value.mean(1);
}

torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& y, int scales,
                      const SsimOptions& opt) {
  return ms_ssim_per_image(x, y, scales, opt).mean();
}

torch::Tensor mix_loss_per_image(const torch::Tensor& target, const torch::Tensor& out, double alpha) {
  require_same_shape(target, out, "mix_loss");
  auto t = batched_image(target), o = batched_image(out);
  const int scales = max_scales(std::min(t.size(2), t.size(3)));
  auto l1 = (t - o).abs().flatten(1).mean(1);
  if (alpha == 0.0) return l1;
  return alpha * (1.0 - ms_ssim_per_image(t, o, scales)) + (1.0 - alpha) * l1;
}

torch::Tensor mix_loss(const torch::Tensor& target, const torch::Tensor& out, double alpha) {
  return mix_loss_per_image(target, out, alpha).mean();
}

torch::Tensor rec_loss(const torch::Tensor& target, const torch::Tensor& out,
                       const std::vector<bool>& same_flags, double alpha) {
  require_same_shape(target, out, "rec_loss");
  auto t = batched_image(target), o = batched_image(out);
  if (static_cast<std::int64_t>(same_flags.size()) != t.size(0))
    throw ShapeError("rec_loss: one same_flag per pair required");
  std::vector<std::int64_t> keep;
  for (std::size_t i = 0; i < same_flags.size(); ++i)
    if (same_flags[i]) keep.push_back(static_cast<std::int64_t>(i));
  if (keep.empty()) return torch::zeros({}, t.options().requires_grad(false));
  if (keep.size() == same_flags.size()) return mix_loss(t, o, alpha);
  auto idx = torch::tensor(keep, torch::kInt64);
  auto gated = mix_loss_per_image(t.index_select(0, idx), o.index_select(0, idx), alpha);
  return gated.sum() / static_cast<double>(same_flags.size());
}

torch::Tensor rec_loss(const torch::Tensor& target, const torch::Tensor& out, bool same_flag,
                       double alpha) {
  const auto n = batched_image(target).size(0);
  return rec_loss(target, out, std::vector<bool>(static_cast<std::size_t>(n), same_flag), alpha);
}

torch::Tensor total_loss(const LossTerms& terms, const LossWeights& w) {
  for (const auto* t : {&terms.id, &terms.lnd, &terms.rec})
    if (!torch::isfinite(*t).all().item<bool>()) throw NumericError("total_loss: non-finite term");
  return w.lambda_id * terms.id + w.lambda_lnd * terms.lnd + w.lambda_rec * terms.rec;
}

double total_loss(double id, double lnd, double rec, const LossWeights& w) {
  if (!std::isfinite(id) || !std::isfinite(lnd) || !std::isfinite(rec))
    throw NumericError("total_loss: non-finite term");
  return w.lambda_id * id + w.lambda_lnd * lnd + w.lambda_rec * rec;
}

double LossReport::term(const std::string& name) const {
  for (const auto& [k, v] : terms)
    if (k == name) return v;
  throw ArgumentError("no loss term named " + name);
}

void LossReport::set(const std::string& name, double value) {
  for (auto& [k, v] : terms)
    if (k == name) {
      v = value;
      return;
    }
  terms.emplace_back(name, value);
}

std::string LossReport::tsv_header() const {
  std::string s = "step";
  for (const auto& [k, v] : terms) s += "\t" + k;
  return s + "\ttotal";
}

std::string LossReport::tsv_row() const {
  std::string s = std::to_string(step);
  char buf[40];
  for (const auto& [k, v] : terms) {
    std::snprintf(buf, sizeof buf, "\t%.9g", v);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "\t%.9g", total);
  return s + buf;
}

void append_log(const std::filesystem::path& path, const LossReport& report) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot append to " + path.string());
  if (fresh) f << report.tsv_header() << '\n';
  f << report.tsv_row() << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace xswap::losses
