#include "testing.hpp"

#include <filesystem>

#include "xswap/error.hpp"
#include "xswap/gan.hpp"
#include "xswap/optim.hpp"

using namespace xswap;

namespace {

GanConfig tiny_gan(std::int64_t steps) {
  GanConfig c;
  c.generator.resolution = 16;
  c.generator.channel_base = 128;
  c.generator.channel_max = 16;
  c.generator.seed = 2;
  c.steps = steps;
  c.batch = 4;
  c.r1_every = 2;
  c.checkpoint_every = 3;
  c.seed = 9;
  return c;
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& ps) {
  std::vector<torch::Tensor> out;
  for (const auto& p : ps) out.push_back(p.detach().clone());
  return out;
}

bool same_values(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!torch::equal(a[i], b[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
  CHECK(optim::cosine_lr(1.0, 0, 100) == doctest::Approx(1.0));
  // The floor is reached on the last step taken.
  CHECK(optim::cosine_lr(1.0, 100, 101) == doctest::Approx(0.05));
  CHECK(optim::cosine_lr(1.0, 50, 101) == doctest::Approx(0.525));
  CHECK(optim::cosine_lr(1.0, 500, 101) == doctest::Approx(0.05));
  CHECK(optim::cosine_lr(2.0, 0, 0) == doctest::Approx(2.0));
}

TEST_CASE("gradient clipping and EMA") {
  auto a = torch::zeros({3}, torch::requires_grad());
  auto b = torch::zeros({4}, torch::requires_grad());
  a.mutable_grad() = torch::full({3}, 3.0);
  b.mutable_grad() = torch::full({4}, 4.0);
  const double n = std::sqrt(27.0 + 64.0);
  CHECK(optim::clip_grad_norm({a, b}, 0) == doctest::Approx(n));
  CHECK(a.grad()[0].item<double>() == 3.0);
  CHECK(optim::clip_grad_norm({a, b}, 1.0) == doctest::Approx(n));
  CHECK(torch::cat({a.grad(), b.grad()}).norm().item<double>() == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(optim::clip_grad_norm({a, b}, 10.0) == doctest::Approx(1.0).epsilon(1e-5));

  auto dst = torch::zeros({2}), src = torch::ones({2});
  optim::ema_update({dst}, {src}, 0.9);
  CHECK(dst[0].item<double>() == doctest::Approx(0.1));
}

TEST_CASE("Adam state round trip continues identically") {
  auto make = [] {
    torch::manual_seed(0);
    return torch::nn::Linear(4, 2);
  };
  auto x = torch::arange(12, torch::kFloat32).view({3, 4}) / 12;
  auto run = [&](torch::nn::Linear& m, torch::optim::Adam& opt, int n) {
    for (int i = 0; i < n; ++i) {
      opt.zero_grad();
      m->forward(x).pow(2).sum().backward();
      opt.step();
    }
  };
  auto m1 = make();
  torch::optim::Adam o1(m1->parameters(), torch::optim::AdamOptions(0.1));
  run(m1, o1, 5);

  auto m2 = make();
  torch::optim::Adam o2(m2->parameters(), torch::optim::AdamOptions(0.1));
  run(m2, o2, 2);
  ParamBundle b;
  optim::export_adam(o2, "adam.", b);
  auto params = snapshot(m2->parameters());

  auto m3 = make();
  {
    torch::NoGradGuard ng;
    for (std::size_t i = 0; i < params.size(); ++i) m3->parameters()[i].copy_(params[i]);
  }
  torch::optim::Adam o3(m3->parameters(), torch::optim::AdamOptions(0.1));
  optim::import_adam(o3, "adam.", b);
  run(m3, o3, 3);
  CHECK(same_values(snapshot(m1->parameters()), snapshot(m3->parameters())));

  // Fresh optimizer exports step 0 and imports cleanly.
  auto m4 = make();
  torch::optim::Adam o4(m4->parameters(), torch::optim::AdamOptions(0.1));
  ParamBundle empty;
  optim::export_adam(o4, "adam.", empty);
  CHECK_NOTHROW(optim::import_adam(o4, "adam.", empty));
}

TEST_CASE("image discriminator shapes") {
  ImageDiscriminator d(16, 128, 16, 1);
  CHECK(d->forward(torch::zeros({5, 3, 16, 16})).sizes() == torch::IntArrayRef({5}));
  CHECK(d->forward(torch::zeros({1, 3, 16, 16})).sizes() == torch::IntArrayRef({1}));
  CHECK_THROWS(d->forward(torch::zeros({2, 3, 32, 32})));
}

TEST_CASE("GAN pretraining: zero steps, determinism, exact resume") {
  auto corpus = procfaces::make_corpus(3, 4, 16, 5);
  auto g0 = pretrain_gan(corpus, tiny_gan(0));
  Generator init(tiny_gan(0).generator);
  CHECK(same_values(snapshot(g0.parameters()), snapshot(init.parameters())));
  CHECK_FALSE(g0.frozen());

  auto a = pretrain_gan(corpus, tiny_gan(5));
  auto b = pretrain_gan(corpus, tiny_gan(5));
  CHECK(same_values(snapshot(a.parameters()), snapshot(b.parameters())));
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK_FALSE(same_values(snapshot(a.parameters()), snapshot(init.parameters())));
  for (const auto& p : a.parameters()) CHECK(torch::isfinite(p).all().item<bool>());

  // Interrupted at 4 with the step-3 snapshot on disk, then resumed to 5.
  const auto dir = std::filesystem::temp_directory_path() / "xswap_gan_resume";
  std::filesystem::remove_all(dir);
  pretrain_gan(corpus, tiny_gan(4), dir);
  CHECK(std::filesystem::exists(dir / "gan_state_00000003.xswg"));
  std::filesystem::remove(dir / "gan_state_00000004.xswg");
  std::vector<std::int64_t> steps_seen;
  auto r = pretrain_gan(corpus, tiny_gan(5), dir, [&](const GanLogRow& row) { steps_seen.push_back(row.step); });
  CHECK(steps_seen == std::vector<std::int64_t>{3, 4});
  CHECK(same_values(snapshot(r.parameters()), snapshot(a.parameters())));
  std::filesystem::remove_all(dir);

  auto bad = procfaces::make_corpus(2, 2, 32, 5);
  CHECK_THROWS(pretrain_gan(bad, tiny_gan(1)));
}
