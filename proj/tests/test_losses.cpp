#include "testing.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "xswap/error.hpp"
#include "xswap/losses.hpp"

using namespace xswap;
using namespace xswap::losses;
using xswap::testing::brute_ms_ssim;
using xswap::testing::grad_check;

namespace {

const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor rand_image(std::uint64_t seed, std::int64_t n, std::int64_t side) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand({n, 3, side, side}, gen, f64) * 2.0 - 1.0;
}

double scalar(const torch::Tensor& t) { return t.item<double>(); }

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST_CASE("adversarial losses at calibration points") {
  auto zeros = torch::zeros({8}, f64);
  CHECK(scalar(adv_d_loss(zeros, zeros)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(scalar(adv_g_loss(zeros)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(scalar(adv_d_loss(torch::full({4}, 30.0, f64), torch::full({4}, -30.0, f64))) < 1e-9);
  CHECK(scalar(adv_g_loss(torch::full({4}, 30.0, f64))) < 1e-9);
  CHECK_THROWS_AS(adv_d_loss(torch::zeros({0}, f64), zeros), ArgumentError);
  CHECK_THROWS_AS(adv_g_loss(torch::zeros({0}, f64)), ArgumentError);
}

TEST_CASE("adversarial losses match the scalar formula") {
  auto gen = at::detail::createCPUGenerator(3);
  auto real = torch::randn({17}, gen, f64) * 3;
  auto fake = torch::randn({9}, gen, f64) * 3;
  double lr = 0, lf = 0, lg = 0, ls = 0;
  for (int i = 0; i < 17; ++i) lr += std::log(sigmoid(real[i].item<double>()));
  for (int i = 0; i < 9; ++i) {
    const double f = fake[i].item<double>();
    lf += std::log(1.0 - sigmoid(f));
    lg += std::log(sigmoid(f));
    ls += std::log(1.0 - sigmoid(f));
  }
  const double d_oracle = -0.5 * lr / 17 - 0.5 * lf / 9;
  CHECK(scalar(adv_d_loss(real, fake)) == doctest::Approx(d_oracle).epsilon(1e-6));
  CHECK(scalar(adv_g_loss(fake)) == doctest::Approx(-lg / 9).epsilon(1e-6));
  CHECK(scalar(adv_g_loss(fake, true)) == doctest::Approx(0.5 * ls / 9).epsilon(1e-6));
  CHECK(scalar(adv_d_loss(real, fake)) >= 0.0);
}

TEST_CASE("r1_penalty: analytic cases") {
  auto gen = at::detail::createCPUGenerator(5);
  auto batch = torch::randn({6, 10, 512}, gen, f64);
  auto a = torch::randn({10, 512}, gen, f64);
  Critic linear = [&](const torch::Tensor& x) { return (x * a).sum({1, 2}); };
  const double expected = 0.5 * 10.0 * a.pow(2).sum().item<double>();
  CHECK(scalar(r1_penalty(linear, batch, 10.0)) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(scalar(r1_penalty(linear, batch, 0.0)) == 0.0);

  Critic constant = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 2.5, x.options()); };
  CHECK(scalar(r1_penalty(constant, batch, 10.0)) == 0.0);
  Critic detached = [](const torch::Tensor& x) { return x.detach().sum({1, 2}) * 0.0 + 1.0; };
  CHECK(scalar(r1_penalty(detached, batch, 10.0)) == 0.0);
}

TEST_CASE("id_loss closed forms") {
  auto e0 = torch::zeros({512}, f64);
  e0[0] = 1.0;
  auto e1 = torch::zeros({512}, f64);
  e1[1] = 1.0;
  CHECK(scalar(id_loss(e0, e0)) == doctest::Approx(0.0));
  CHECK(scalar(id_loss(e0, e1)) == doctest::Approx(1.0));
  CHECK(scalar(id_loss(e0, -e0)) == doctest::Approx(2.0));
  CHECK_THROWS_AS(id_loss(e0, torch::zeros({512}, f64)), ArgumentError);
}

TEST_CASE("landmark_loss closed forms") {
  auto gen = at::detail::createCPUGenerator(6);
  auto lm = torch::rand({68, 2}, gen, f64) * 64;
  CHECK(scalar(landmark_loss(lm, lm)) == 0.0);
  auto one = lm.clone();
  one[10][0] += 3.0;
  one[10][1] += 4.0;
  CHECK(scalar(landmark_loss(lm, one)) == doctest::Approx(5.0).epsilon(1e-12));
  auto all = lm + torch::tensor({3.0, 4.0}, f64);
  // Flat 136-vector of alternating 3s and 4s has norm sqrt(68 * 25).
  CHECK(scalar(landmark_loss(lm, all)) == doctest::Approx(5.0 * std::sqrt(68.0)).epsilon(1e-10));
  CHECK(scalar(landmark_loss(lm, all)) == doctest::Approx(41.231).epsilon(1e-4));
  CHECK_THROWS_AS(landmark_loss(lm, torch::zeros({67, 2}, f64)), ShapeError);
}

TEST_CASE("ms_ssim: weights and scale selection") {
  auto w3 = ms_ssim_weights(3);
  CHECK(w3.size() == 3);
  const double s3 = 0.0448 + 0.2856 + 0.3001;
  CHECK(w3[0] == doctest::Approx(0.0448 / s3));
  CHECK(w3[2] == doctest::Approx(0.3001 / s3));
  CHECK(max_scales(64) == 3);
  CHECK(max_scales(176) == 5);
  CHECK(max_scales(11) == 1);
  CHECK(max_scales(10) == 0);
}

TEST_CASE("ms_ssim: self similarity, symmetry, errors") {
  auto x = rand_image(7, 2, 64);
  auto y = rand_image(8, 2, 64);
  CHECK(scalar(ms_ssim(x, x, 3)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(std::abs(scalar(ms_ssim(x, y, 3)) - scalar(ms_ssim(y, x, 3))) < 1e-9);
  auto xf = x.to(torch::kFloat32);
  CHECK(std::abs(scalar(ms_ssim(xf, xf, 3)) - 1.0) < 1e-6);
  CHECK_THROWS_AS(ms_ssim(x, y, 4), ConfigError);
  CHECK_THROWS_AS(ms_ssim(x, y.slice(2, 0, 32), 1), ShapeError);
}

TEST_CASE("ms_ssim: constant images reduce to the luminance term") {
  for (auto [c1v, c2v] : {std::pair{-0.3, 0.4}, std::pair{0.9, -0.9}, std::pair{0.2, 0.2}}) {
    auto a = torch::full({1, 3, 64, 64}, c1v, f64);
    auto b = torch::full({1, 3, 64, 64}, c2v, f64);
    // Images are shifted into [0, 2] before comparison.
    const double p = c1v + 1.0, q = c2v + 1.0, C1 = 0.02 * 0.02;
    const double wm = ms_ssim_weights(3).back();
    const double expected = std::pow((2 * p * q + C1) / (p * p + q * q + C1), wm);
    CHECK(scalar(ms_ssim(a, b, 3)) == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("ms_ssim matches a plain-loop implementation") {
  auto gen = at::detail::createCPUGenerator(9);
  auto x = torch::rand({3, 48, 48}, gen, f64) * 2 - 1;
  // Correlated second image so the structure terms stay positive.
  auto y = (x * 0.7 + (torch::rand({3, 48, 48}, gen, f64) * 2 - 1) * 0.3).clamp(-1, 1);
  for (int scales : {1, 2, 3}) {
    INFO("scales " << scales);
    CHECK(scalar(ms_ssim(x, y, scales)) == doctest::Approx(brute_ms_ssim(x, y, scales)).epsilon(1e-6));
  }
  // Odd sizes exercise the pooling pad.
  auto xo = x.slice(1, 0, 45).slice(2, 0, 45), yo = y.slice(1, 0, 45).slice(2, 0, 45);
  CHECK(scalar(ms_ssim(xo, yo, 2)) == doctest::Approx(brute_ms_ssim(xo, yo, 2)).epsilon(1e-6));
}

TEST_CASE("mix_loss cases") {
  auto x = rand_image(10, 1, 64);
  CHECK(scalar(mix_loss(x, x, 0.84)) == doctest::Approx(0.0).epsilon(1e-6));
  auto a = torch::full({1, 3, 64, 64}, 0.1, f64);
  auto b = torch::full({1, 3, 64, 64}, 0.6, f64);
  CHECK(scalar(mix_loss(a, b, 0.0)) == doctest::Approx(0.5).epsilon(1e-12));
  auto y = rand_image(11, 1, 64);
  const double oracle = 0.84 * (1 - scalar(ms_ssim(x, y, 3))) + 0.16 * scalar((x - y).abs().mean());
  CHECK(scalar(mix_loss(x, y, 0.84)) == doctest::Approx(oracle).epsilon(1e-6));
  CHECK_THROWS_AS(mix_loss(x, y.slice(3, 0, 32), 0.5), ShapeError);
}

TEST_CASE("mix_loss is non-increasing in ms_ssim at fixed L1") {
  // Same L1 to the target (every pixel off by exactly 0.2) with different structure.
  auto t = rand_image(12, 1, 64).clamp(-0.7, 0.7);
  auto shift = t + 0.2;                                 // structure preserved
  auto gen = at::detail::createCPUGenerator(13);
  auto signs = torch::randint(0, 2, t.sizes(), gen, f64) * 2 - 1;
  auto noisy = t + 0.2 * signs;                         // structure damaged
  REQUIRE(scalar((t - shift).abs().mean()) == doctest::Approx(scalar((t - noisy).abs().mean())));
  REQUIRE(scalar(ms_ssim(t, shift, 3)) > scalar(ms_ssim(t, noisy, 3)));
  CHECK(scalar(mix_loss(t, shift, 0.84)) <= scalar(mix_loss(t, noisy, 0.84)));
}

TEST_CASE("rec_loss gate") {
  auto x = rand_image(14, 3, 64);
  auto y = rand_image(15, 3, 64).requires_grad_(true);
  auto closed = rec_loss(x, y, false, 0.84);
  CHECK(scalar(closed) == 0.0);
  CHECK_FALSE(closed.requires_grad());
  CHECK(torch::equal(rec_loss(x, y, true, 0.84), mix_loss(x, y, 0.84)));

  // Gradient with respect to the output is exactly zero when closed.
  auto open_mixed = rec_loss(x, y, std::vector<bool>{true, false, false}, 0.84);
  auto g = torch::autograd::grad({open_mixed}, {y})[0];
  CHECK(g.slice(0, 1).abs().max().item<double>() == 0.0);
  CHECK(g.slice(0, 0, 1).abs().max().item<double>() > 0.0);
  // Mixed batch averages over all pairs.
  const double first = scalar(mix_loss(x.slice(0, 0, 1), y.slice(0, 0, 1), 0.84));
  CHECK(scalar(open_mixed) == doctest::Approx(first / 3.0).epsilon(1e-12));
}

TEST_CASE("total_loss recombination") {
  LossWeights zero{0, 0, 0, 0, 0.84, 10};
  CHECK(total_loss(0.4, 0.7, 0.9, zero) == 0.0);
  LossWeights unit{1, 1, 1, 0, 0.84, 10};
  CHECK(total_loss(0.2, 0.3, 0.5, unit) == doctest::Approx(1.0).epsilon(1e-15));
  LossWeights def;
  CHECK(def.lambda_id == 1.0);
  CHECK(def.lambda_lnd == 1.0);
  CHECK(def.lambda_rec == 0.02);
  CHECK(def.lambda_adv == 0.0001);
  CHECK(def.alpha == 0.84);
  auto gen = at::detail::createCPUGenerator(16);
  auto terms = torch::rand({3}, gen, f64);
  const double i = terms[0].item<double>(), l = terms[1].item<double>(), r = terms[2].item<double>();
  const double oracle = 1.0 * i + 1.0 * l + 0.02 * r;
  auto t = total_loss({terms[0], terms[1], terms[2]}, def);
  CHECK(scalar(t) == doctest::Approx(oracle).epsilon(1e-12));
  CHECK_THROWS_AS(total_loss(std::nan(""), 0, 0, def), NumericError);
  CHECK_THROWS_AS(total_loss({torch::tensor(INFINITY, f64), terms[1], terms[2]}, def), NumericError);
  LossWeights bad;
  bad.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.alpha = 0.5;
  bad.lambda_id = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("losses are nonnegative and bounded on random inputs") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto gen = at::detail::createCPUGenerator(100 + s);
    auto a = torch::randn({4, 512}, gen, f64), b = torch::randn({4, 512}, gen, f64);
    const double il = scalar(id_loss(a, b));
    CHECK(il >= 0.0);
    CHECK(il <= 2.0);
    auto x = rand_image(200 + s, 1, 64), y = rand_image(300 + s, 1, 64);
    const double m = scalar(ms_ssim(x, y, 3));
    CHECK(m > 0.0);
    CHECK(m <= 1.0);
    CHECK(scalar(mix_loss(x, y, 0.84)) >= 0.0);
    auto r = torch::randn({5}, gen, f64) * 4, f = torch::randn({5}, gen, f64) * 4;
    CHECK(scalar(adv_d_loss(r, f)) >= 0.0);
    CHECK(scalar(adv_g_loss(f)) >= 0.0);
  }
}

TEST_CASE("loss gradients match central finite differences") {
  auto gen = at::detail::createCPUGenerator(17);
  auto emb_a = torch::randn({3, 512}, gen, f64);
  auto emb_b = torch::randn({3, 512}, gen, f64);
  CHECK(grad_check([&](const torch::Tensor& x) { return id_loss(emb_a, x); }, emb_b).relative_error < 1e-3);

  auto lm_a = torch::rand({2, 68, 2}, gen, f64) * 8, lm_b = torch::rand({2, 68, 2}, gen, f64) * 8;
  CHECK(grad_check([&](const torch::Tensor& x) { return landmark_loss(lm_a, x); }, lm_b).relative_error < 1e-3);

  // MS-SSIM needs an 11-pixel window; 8x8 inputs are checked at a single
  // scale with a reduced window, 64px inputs at the full three scales.
  auto s8a = rand_image(18, 1, 8), s8b = (s8a * 0.6 + rand_image(19, 1, 8) * 0.4);
  SsimOptions small;
  small.window = 5;
  CHECK(grad_check([&](const torch::Tensor& x) { return ms_ssim(s8a, x, 1, small); }, s8b).relative_error < 1e-3);
  auto x64 = rand_image(20, 1, 64), y64 = (x64 * 0.6 + rand_image(21, 1, 64) * 0.4);
  CHECK(grad_check([&](const torch::Tensor& x) { return ms_ssim(x64, x, 3); }, y64).relative_error < 1e-3);
  CHECK(grad_check([&](const torch::Tensor& x) { return mix_loss(x64, x, 0.84); }, y64).relative_error < 1e-3);
  CHECK(grad_check([&](const torch::Tensor& x) { return rec_loss(x64, x, true, 0.84); }, y64).relative_error < 1e-3);
  auto closed = grad_check([&](const torch::Tensor& x) { return rec_loss(x64, x, false, 0.84); }, y64);
  CHECK(closed.fd_norm == 0.0);

  auto logits = torch::randn({7}, gen, f64) * 2;
  auto other = torch::randn({5}, gen, f64) * 2;
  CHECK(grad_check([&](const torch::Tensor& x) { return adv_d_loss(x, other); }, logits).relative_error < 1e-3);
  CHECK(grad_check([&](const torch::Tensor& x) { return adv_d_loss(other, x); }, logits).relative_error < 1e-3);
  CHECK(grad_check([&](const torch::Tensor& x) { return adv_g_loss(x); }, logits).relative_error < 1e-3);

  // R1 is differentiated through the critic's input gradient (double backprop).
  auto batch = torch::randn({4, 6}, gen, f64);
  auto wmat = torch::randn({6, 5}, gen, f64);
  auto check_r1 = [&](const torch::Tensor& v) {
    Critic critic = [&](const torch::Tensor& x) { return torch::tanh(x.matmul(wmat)).matmul(v); };
    return r1_penalty(critic, batch, 10.0);
  };
  CHECK(grad_check(check_r1, torch::randn({5}, gen, f64)).relative_error < 1e-3);
}

TEST_CASE("LossReport rows and train_log.tsv") {
  LossReport r;
  r.step = 3;
  r.set("id", 0.5);
  r.set("lnd", 1.25);
  r.set("rec", 0.0);
  r.total = total_loss(0.5, 1.25, 0.0, LossWeights{});
  CHECK(r.tsv_header() == "step\tid\tlnd\trec\ttotal");
  CHECK(r.tsv_row() == "3\t0.5\t1.25\t0\t1.75");
  const auto path = std::filesystem::temp_directory_path() / "xswap_test_log.tsv";
  std::filesystem::remove(path);
  append_log(path, r);
  r.step = 4;
  append_log(path, r);
  std::ifstream f(path);
  std::string l1, l2, l3;
  std::getline(f, l1);
  std::getline(f, l2);
  std::getline(f, l3);
  CHECK(l1 == "step\tid\tlnd\trec\ttotal");
  CHECK(l2.rfind("3\t", 0) == 0);
  CHECK(l3.rfind("4\t", 0) == 0);
  std::filesystem::remove(path);
}
