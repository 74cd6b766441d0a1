#include "testing.hpp"

#include <filesystem>
#include <fstream>
#include <random>

#include "xswap/error.hpp"
#include "xswap/evalkit.hpp"

using namespace xswap;
using namespace xswap::eval;

namespace {

GaussianStats isotropic(int d, double sigma, double shift = 0.0) {
  GaussianStats s;
  s.mu = Eigen::VectorXd::Constant(d, shift);
  s.sigma = Eigen::MatrixXd::Identity(d, d) * sigma * sigma;
  return s;
}

IdentityEncoder tiny_encoder(std::int64_t res = 32) {
  IdentityEncoderConfig c;
  c.resolution = res;
  c.width = 32;
  c.depth = 1;
  c.heads = 2;
  c.seed = 11;
  IdentityEncoder e(c);
  e.freeze();
  return e;
}

}  // namespace

TEST_CASE("gaussian_stats by hand and against a two-pass oracle") {
  Eigen::MatrixXd two(2, 2);
  two << 0, 0, 2, 0;
  auto s = gaussian_stats(two);
  CHECK(s.mu(0) == 1.0);
  CHECK(s.mu(1) == 0.0);
  CHECK(s.sigma(0, 0) == doctest::Approx(2.0));
  CHECK(s.sigma(0, 1) == 0.0);
  CHECK(s.sigma(1, 1) == 0.0);

  Eigen::MatrixXd dup(5, 3);
  for (int i = 0; i < 5; ++i) dup.row(i) << 1.5, -2, 7;
  CHECK(gaussian_stats(dup).sigma.cwiseAbs().maxCoeff() == 0.0);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd x(40, 6);
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 6; ++j) x(i, j) = nd(rng) * (j + 1) + j;
  auto g = gaussian_stats(x);
  for (int a = 0; a < 6; ++a) {
    double mean_a = 0;
    for (int i = 0; i < 40; ++i) mean_a += x(i, a);
    mean_a /= 40;
    CHECK(std::abs(g.mu(a) - mean_a) <= 1e-10);
    for (int b = 0; b < 6; ++b) {
      double mean_b = 0, acc = 0;
      for (int i = 0; i < 40; ++i) mean_b += x(i, b);
      mean_b /= 40;
      for (int i = 0; i < 40; ++i) acc += (x(i, a) - mean_a) * (x(i, b) - mean_b);
      CHECK(std::abs(g.sigma(a, b) - acc / 39) <= 1e-10);
    }
  }
  // Tensor overload agrees.
  auto t = torch::from_blob(x.data(), {6, 40}, torch::kFloat64).t().contiguous();
  CHECK((gaussian_stats(t).sigma - g.sigma).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(gaussian_stats(Eigen::MatrixXd(1, 3)), ArgumentError);
}

TEST_CASE("frechet distance closed forms") {
  auto a = isotropic(1, 1.0), b = isotropic(1, 1.0, 1.0);
  CHECK(std::abs(frechet_distance(a, b) - 1.0) <= 1e-8);
  CHECK(std::abs(frechet_distance(a, a)) <= 1e-8);
  for (int d : {3, 16, 128}) {
    const double s1 = 0.7, s2 = 1.9;
    CHECK(std::abs(frechet_distance(isotropic(d, s1), isotropic(d, s2)) - d * (s1 - s2) * (s1 - s2)) <= 1e-6);
  }

  // Symmetry and self-distance on random full covariances.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  auto random_stats = [&](int d) {
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) m(i, j) = nd(rng);
    GaussianStats s;
    s.sigma = m * m.transpose() / d;
    s.mu = Eigen::VectorXd::NullaryExpr(d, [&] { return nd(rng); });
    return s;
  };
  auto p = random_stats(8), q = random_stats(8);
  CHECK(std::abs(frechet_distance(p, q) - frechet_distance(q, p)) <= 1e-8);
  CHECK(std::abs(frechet_distance(p, p)) <= 1e-8);
  CHECK(frechet_distance(p, q) > 0);
  // Commuting (diagonal) covariances: closed form sum (sqrt a - sqrt b)^2.
  GaussianStats da = isotropic(3, 1), db = isotropic(3, 1);
  da.sigma.diagonal() << 1, 4, 9;
  db.sigma.diagonal() << 4, 4, 1;
  CHECK(std::abs(frechet_distance(da, db) - (1 + 0 + 4)) <= 1e-10);

  CHECK_THROWS_AS(frechet_distance(isotropic(2, 1), isotropic(3, 1)), ArgumentError);
  auto bad = isotropic(2, 1);
  bad.sigma(0, 0) = -1;
  CHECK_THROWS_AS(frechet_distance(bad, isotropic(2, 1)), NumericError);
}

TEST_CASE("Monte-Carlo sample statistics approach the generating Gaussian") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  const int n = 20000, d = 4;
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = 2.0 * nd(rng) + 1.0;
  auto s = gaussian_stats(x);
  CHECK(frechet_distance(s, isotropic(d, 2.0, 1.0)) < 0.01);
  CHECK(frechet_distance(s, isotropic(d, 2.2, 1.0)) > 0.1);
}

TEST_CASE("fid on images: zero on itself, order invariant, monotone in noise") {
  auto enc = tiny_encoder();
  auto corpus = procfaces::make_corpus(4, 10, 32, 2);
  auto real = corpus.images();
  auto f = probe_features(enc);
  CHECK(extract_features(f, real.slice(0, 0, 3)).sizes() == torch::IntArrayRef({3, 32}));
  CHECK(std::abs(fid(real, real, f, 7)) <= 1e-6);
  auto perm = torch::randperm(real.size(0), torch::TensorOptions().dtype(torch::kInt64));
  auto gen = torch_generator(4);
  auto noise = torch::rand(real.sizes(), gen) * 2 - 1;
  auto low = (real + 0.1 * noise).clamp(-1, 1), high = (real + 0.3 * noise).clamp(-1, 1);
  const double fl = fid(real, low, f), fh = fid(real, high, f);
  MESSAGE("fid noise 0.1: " << fl << "  0.3: " << fh);
  CHECK(fh > fl);
  CHECK(std::abs(fid(real, high.index_select(0, perm), f) - fh) <= 1e-6 * std::max(1.0, fh));
  CHECK_THROWS_AS(fid(real.slice(0, 0, 0), real, f), ArgumentError);
}

TEST_CASE("identity similarity") {
  auto enc = tiny_encoder();
  auto corpus = procfaces::make_corpus(3, 6, 32, 8);
  auto x = corpus.images();
  CHECK(std::abs(identity_similarity(enc, x, x, 4) - 1.0) <= 1e-6);
  const double other = identity_similarity(enc, x, x.roll(1, 0));
  CHECK(other < 1.0);
  CHECK(other >= -1.0);
  CHECK_THROWS_AS(identity_similarity(enc, x, x.slice(0, 0, 5)), ArgumentError);
}

TEST_CASE("factor probes: chance at zero steps, learning, metadata path, save/load") {
  auto corpus = procfaces::make_corpus(4, 40, 32, 6);
  ProbeConfig c;
  c.steps = 0;
  c.seed = 1;
  auto r0 = train_factor_probes(corpus, c);
  // Uniform priors: yaw on [-45, 45] gives MAE ~22.5, mouth on [-1, 1] ~0.5.
  CHECK(r0.yaw_mae > 12.0);
  CHECK(r0.mouth_mae > 0.25);

  c.steps = 300;
  auto r = train_factor_probes(corpus, c);
  MESSAGE("probe yaw " << r.yaw_mae << " mouth " << r.mouth_mae);
  CHECK(r.yaw_mae < 0.6 * r0.yaw_mae);
  auto again = train_factor_probes(corpus, c);
  CHECK(again.probe.fingerprint() == r.probe.fingerprint());

  std::vector<FaceMeta> meta;
  for (const auto& e : corpus.entries) meta.push_back({e.identity, e.attributes});
  auto x = corpus.images();
  auto self = pose_expr_error(r.probe, x, x);
  CHECK(self.pose == 0.0);
  CHECK(self.expr == 0.0);
  auto vs_meta = pose_expr_error(r.probe, meta, x);
  CHECK(vs_meta.pose > 0.0);
  CHECK(vs_meta.pose <= 90.0);
  CHECK_THROWS_AS(pose_expr_error(r.probe, std::span<const FaceMeta>(meta).subspan(1), x), ArgumentError);
  CHECK_THROWS_AS(pose_expr_error(r.probe, x, x.slice(0, 1)), ArgumentError);

  const auto path = std::filesystem::temp_directory_path() / "xswap_probe.xswe";
  r.probe.save(path);
  auto back = FactorProbe::load(path);
  CHECK(torch::equal(back.predict(x.slice(0, 0, 4)), r.probe.predict(x.slice(0, 0, 4))));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(FactorProbe(16, 1), ConfigError);
}

TEST_CASE("controlled yaw shift is measured by the probe") {
  // Trained long enough on 32px renders to resolve a 20 degree shift.
  auto corpus = procfaces::make_corpus(4, 60, 32, 12);
  ProbeConfig c;
  c.steps = 600;
  c.seed = 2;
  auto r = train_factor_probes(corpus, c);
  std::vector<torch::Tensor> base, shifted;
  Rng rng(5);
  for (int i = 0; i < 40; ++i) {
    auto id = procfaces::sample_identity(12, i % 4);
    auto attr = procfaces::sample_attributes(rng);
    attr.yaw = -40 + std::fmod(i * 7.0, 60.0);
    base.push_back(procfaces::render(id, attr, 32));
    attr.yaw += 20;
    shifted.push_back(procfaces::render(id, attr, 32));
  }
  auto e = pose_expr_error(r.probe, torch::stack(base), torch::stack(shifted));
  MESSAGE("probe held-out yaw " << r.yaw_mae << ", shift estimate " << e.pose);
  CHECK(std::abs(e.pose - 20.0) <= 2.0 * r.yaw_mae + 2.0);
}

TEST_CASE("eval report and montage files") {
  const auto dir = std::filesystem::temp_directory_path() / "xswap_eval_files";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  EvalReport r;
  r.step = 100;
  r.id_similarity = 0.5;
  r.fid = 3.25;
  r.pairs = 10;
  append_eval_report(dir / "eval_report.tsv", r);
  r.step = 200;
  append_eval_report(dir / "eval_report.tsv", r);
  std::ifstream f(dir / "eval_report.tsv");
  std::string line;
  std::getline(f, line);
  CHECK(line == eval_tsv_header());
  std::getline(f, line);
  CHECK(line.rfind("100\t0.5\t", 0) == 0);
  std::getline(f, line);
  CHECK(line.rfind("200\t", 0) == 0);

  auto x = torch::zeros({3, 3, 16, 16});
  write_swap_montage(dir / "m.png", x, x, x);
  auto m = read_png(dir / "m.png");
  CHECK(m.size(1) > 3 * 16);
  CHECK(m.size(2) > 3 * 16);
  CHECK_THROWS_AS(write_swap_montage(dir / "n.png", x, x.slice(0, 1), x), ArgumentError);
  std::filesystem::remove_all(dir);
}
