#include "xswap/gan.hpp"

#include <cmath>
#include <cstdio>
#include <regex>

#include "xswap/checkpoint.hpp"
#include "xswap/error.hpp"
#include "xswap/losses.hpp"
#include "xswap/optim.hpp"
#include "xswap/rng.hpp"

namespace xswap {

using layers::EqualConv2d;
using layers::EqualLinear;
using layers::lrelu;

ImageDiscriminatorImpl::ImageDiscriminatorImpl(std::int64_t res, std::int64_t channel_base,
                                               std::int64_t channel_max, std::uint64_t seed)
    : resolution(res) {
  num_styles(res);  // validates the resolution
  auto ch = [&](std::int64_t r) { return std::max<std::int64_t>(1, std::min(channel_max, channel_base / r)); };
  auto gen = torch_generator(seed);
  from_rgb = register_module("from_rgb", EqualConv2d(3, ch(res), 1, gen));
  int i = 0;
  for (std::int64_t r = res; r > 4; r /= 2, ++i) {
    const auto tag = std::to_string(i);
    conv1.push_back(register_module("conv1_" + tag, EqualConv2d(ch(r), ch(r), 3, gen)));
    conv2.push_back(register_module("conv2_" + tag, EqualConv2d(ch(r), ch(r / 2), 3, gen)));
    skip.push_back(register_module("skip_" + tag, EqualConv2d(ch(r), ch(r / 2), 1, gen, 1, false)));
  }
  final_conv = register_module("final_conv", EqualConv2d(ch(4) + 1, ch(4), 3, gen));
  fc = register_module("fc", EqualLinear(ch(4) * 16, ch(4), gen));
  out = register_module("out", EqualLinear(ch(4), 1, gen));
}

torch::Tensor ImageDiscriminatorImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(2) != resolution || images.size(3) != resolution)
    throw ShapeError("image discriminator expects [N, 3, " + std::to_string(resolution) + ", " +
                     std::to_string(resolution) + "]");
  auto x = lrelu(from_rgb->forward(images));
  for (std::size_t b = 0; b < conv1.size(); ++b) {
    auto y = lrelu(conv1[b]->forward(x));
    y = lrelu(conv2[b]->forward(torch::avg_pool2d(y, 2)));
    x = (y + skip[b]->forward(torch::avg_pool2d(x, 2))) / std::sqrt(2.0);
  }
  // Minibatch standard deviation over groups of up to four samples.
  const auto n = x.size(0);
  const auto g = std::min<std::int64_t>(4, n);
  if (n % g == 0) {
    auto grouped = x.view({g, n / g, x.size(1), x.size(2), x.size(3)});
    auto sd = (grouped.var(0, false) + 1e-8).sqrt().mean({1, 2, 3});  // [n / g]
    auto feat = sd.view({1, n / g, 1, 1, 1}).expand({g, n / g, 1, x.size(2), x.size(3)}).reshape({n, 1, x.size(2), x.size(3)});
    x = torch::cat({x, feat}, 1);
  } else {
    x = torch::cat({x, torch::zeros({n, 1, x.size(2), x.size(3)}, x.options())}, 1);
  }
  x = lrelu(final_conv->forward(x));
  return out->forward(lrelu(fc->forward(x.flatten(1)))).squeeze(1);
}

GanTrainer::GanTrainer(const procfaces::Corpus& corpus, const GanConfig& cfg) : cfg_(cfg) {
  if (corpus.entries.empty()) throw ArgumentError("GAN pretraining needs a nonempty corpus");
  if (cfg.generator.resolution != corpus.resolution)
    throw ConfigError("generator resolution " + std::to_string(cfg.generator.resolution) +
                      " does not match corpus resolution " + std::to_string(corpus.resolution));
  if (cfg.batch < 1 || cfg.steps < 0 || cfg.r1_every < 1) throw ConfigError("GAN pretraining: bad schedule");
  reals_ = corpus.images();
  g_ = Generator(cfg.generator);
  ema_ = g_.clone();
  ema_.freeze();
  d_ = ImageDiscriminator(cfg.generator.resolution, cfg.generator.channel_base, cfg.generator.channel_max,
                          derive_seed(cfg.seed, 0xD));
  const auto betas = std::make_tuple(cfg.beta1, cfg.beta2);
  opt_g_ = std::make_unique<torch::optim::Adam>(g_.parameters(), torch::optim::AdamOptions(cfg.lr).betas(betas).eps(1e-8));
  // Lazy R1: scale the discriminator's momentum as in the usual recipe.
  const double c = static_cast<double>(cfg.r1_every) / static_cast<double>(cfg.r1_every + 1);
  opt_d_ = std::make_unique<torch::optim::Adam>(
      d_->parameters(), torch::optim::AdamOptions(cfg.lr * c).betas(std::make_tuple(std::pow(cfg.beta1, c), std::pow(cfg.beta2, c))).eps(1e-8));
}

GanLogRow GanTrainer::step() {
  const auto t = step_;
  GanLogRow row{t, 0.0, 0.0, 0.0};
  auto idx_gen = torch_generator(derive_seed(cfg_.seed, static_cast<std::uint64_t>(t), 1));
  auto idx = torch::randint(reals_.size(0), {cfg_.batch}, idx_gen, torch::kInt64);
  auto real = reals_.index_select(0, idx);

  // Discriminator phase.
  {
    torch::Tensor fake;
    {
      torch::NoGradGuard ng;
      auto zg = torch_generator(derive_seed(cfg_.seed, static_cast<std::uint64_t>(t), 0));
      fake = g_.generate(sample_z(zg, cfg_.batch));
    }
    opt_d_->zero_grad();
    auto d_loss = 2.0 * losses::adv_d_loss(d_->forward(real), d_->forward(fake));
    row.d_loss = d_loss.item<double>();
    if (t % cfg_.r1_every == 0 && cfg_.r1_gamma > 0.0) {
      auto r1 = losses::r1_penalty([&](const torch::Tensor& x) { return d_->forward(x); }, real, cfg_.r1_gamma);
      row.r1 = r1.item<double>();
      d_loss = d_loss + r1 * static_cast<double>(cfg_.r1_every);
    }
    if (!std::isfinite(row.d_loss) || !std::isfinite(row.r1)) throw TrainingError("GAN discriminator loss is not finite", t);
    d_loss.backward();
    opt_d_->step();
  }
  // Generator phase.
  {
    auto zg = torch_generator(derive_seed(cfg_.seed, static_cast<std::uint64_t>(t), 2));
    opt_g_->zero_grad();
    auto g_loss = losses::adv_g_loss(d_->forward(g_.generate(sample_z(zg, cfg_.batch))));
    row.g_loss = g_loss.item<double>();
    if (!std::isfinite(row.g_loss)) throw TrainingError("GAN generator loss is not finite", t);
    g_loss.backward();
    opt_g_->step();
  }
  optim::ema_update(ema_.parameters(), g_.parameters(), cfg_.ema_beta);
  ++step_;
  return row;
}

void GanTrainer::save_state(const std::filesystem::path& path) const {
  ParamBundle b;
  b.resolution = static_cast<std::uint32_t>(cfg_.generator.resolution);
  b.add("state.step", pack_u64(static_cast<std::uint64_t>(step_)));
  export_module(g_.module(), "live.", b);
  export_module(ema_.module(), "ema.", b);
  export_module(*d_, "d.", b);
  optim::export_adam(*opt_g_, "adam_g.", b);
  optim::export_adam(*opt_d_, "adam_d.", b);
  write_container(path, kGeneratorMagic, b);
}

void GanTrainer::load_state(const std::filesystem::path& path) {
  auto b = read_container(path, kGeneratorMagic);
  if (b.resolution != cfg_.generator.resolution) throw FormatError("GAN state resolution mismatch in " + path.string());
  step_ = static_cast<std::int64_t>(unpack_u64(b.get("state.step")));
  import_module(g_.module(), "live.", b);
  import_module(ema_.module(), "ema.", b);
  import_module(*d_, "d.", b);
  optim::import_adam(*opt_g_, "adam_g.", b);
  optim::import_adam(*opt_d_, "adam_d.", b);
}

namespace {

std::filesystem::path latest_state(const std::filesystem::path& dir) {
  static const std::regex pat(R"(gan_state_(\d{8})\.xswg)");
  std::filesystem::path best;
  long long best_step = -1;
  if (!std::filesystem::is_directory(dir)) return best;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const auto name = e.path().filename().string();
    if (std::regex_match(name, m, pat) && std::stoll(m[1]) > best_step) {
      best_step = std::stoll(m[1]);
      best = e.path();
    }
  }
  return best;
}

std::filesystem::path state_path(const std::filesystem::path& dir, std::int64_t step) {
  char name[40];
  std::snprintf(name, sizeof name, "gan_state_%08lld.xswg", static_cast<long long>(step));
  return dir / name;
}

}  // namespace

Generator pretrain_gan(const procfaces::Corpus& corpus, const GanConfig& cfg, const std::filesystem::path& work_dir,
                       const std::function<void(const GanLogRow&)>& log) {
  GanTrainer trainer(corpus, cfg);
  if (!work_dir.empty()) {
    std::filesystem::create_directories(work_dir);
    if (auto p = latest_state(work_dir); !p.empty()) trainer.load_state(p);
  }
  while (!trainer.finished()) {
    auto row = trainer.step();
    if (log) log(row);
    if (!work_dir.empty() && cfg.checkpoint_every > 0 &&
        (trainer.steps_done() % cfg.checkpoint_every == 0 || trainer.finished()))
      trainer.save_state(state_path(work_dir, trainer.steps_done()));
  }
  auto g = trainer.ema().clone();
  for (auto& p : g.parameters()) p.set_requires_grad(true);
  g.update_w_avg(4096, derive_seed(cfg.seed, 0xA1));
  return g;
}

}  // namespace xswap
