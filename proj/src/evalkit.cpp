#include "xswap/evalkit.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "conv_trunk.hpp"
#include "sampling.hpp"
#include "xswap/checkpoint.hpp"
#include "xswap/error.hpp"
#include "xswap/image.hpp"
#include "xswap/losses.hpp"
#include "xswap/optim.hpp"
#include "xswap/rng.hpp"

namespace xswap::eval {

using detail::BatchSampler;
using detail::take;

namespace {

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

// Applies f to consecutive chunks and concatenates along dim 0.
template <class F>
torch::Tensor chunked(const torch::Tensor& x, std::int64_t batch, F&& f) {
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < x.size(0); i += batch) parts.push_back(f(x.slice(0, i, std::min(i + batch, x.size(0)))));
  return torch::cat(parts);
}

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (x.dim() != 2) throw ShapeError("features must be [N, d]");
  Eigen::MatrixXd m(x.size(0), x.size(1));
  auto a = x.accessor<double, 2>();
  for (std::int64_t i = 0; i < x.size(0); ++i)
    for (std::int64_t j = 0; j < x.size(1); ++j) m(i, j) = a[i][j];
  return m;
}

void check_pair_counts(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.size(0) != b.size(0))
    throw ArgumentError("paired image sets differ in size: " + std::to_string(a.size(0)) + " vs " +
                        std::to_string(b.size(0)));
  if (a.size(0) == 0) throw ArgumentError("empty image set");
}

}  // namespace

GaussianStats gaussian_stats(const Eigen::MatrixXd& f) {
  if (f.rows() < 2) throw ArgumentError("gaussian_stats needs at least two samples");
  GaussianStats s;
  s.mu = f.colwise().mean().transpose();
  const Eigen::MatrixXd c = f.rowwise() - s.mu.transpose();
  s.sigma = (c.transpose() * c) / static_cast<double>(f.rows() - 1);
  s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
  return s;
}

GaussianStats gaussian_stats(const torch::Tensor& features) { return gaussian_stats(to_eigen(features)); }

namespace {

// Symmetric PSD square root with clamping of round-off negatives.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
  auto ev = es.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -tol) throw NumericError(std::string(what) + " is not positive semidefinite");
  return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const auto d = a.mu.size();
  if (b.mu.size() != d || a.sigma.rows() != d || a.sigma.cols() != d || b.sigma.rows() != d || b.sigma.cols() != d)
    throw ArgumentError("frechet_distance: dimension mismatch");
  // Tr (Sa Sb)^(1/2) = Tr (Sa^(1/2) Sb Sa^(1/2))^(1/2); the inner matrix is symmetric PSD.
  const auto ra = psd_sqrt(a.sigma, "first covariance");
  psd_sqrt(b.sigma, "second covariance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (ra * b.sigma * ra + (ra * b.sigma * ra).transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double v = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross;
  if (v < -1e-6) throw NumericError("frechet_distance came out negative: " + std::to_string(v));
  return std::max(v, 0.0);
}

torch::Tensor extract_features(const FeatureExtractor& f, const torch::Tensor& images, std::int64_t batch) {
  torch::NoGradGuard ng;
  auto x = batched(images);
  if (x.size(0) == 0) throw ArgumentError("no images to extract features from");
  return chunked(x, batch, [&](const torch::Tensor& c) { return f(c).to(torch::kFloat64); });
}

double fid(const torch::Tensor& real, const torch::Tensor& fake, const FeatureExtractor& f, std::int64_t batch) {
  return frechet_distance(gaussian_stats(extract_features(f, real, batch)),
                          gaussian_stats(extract_features(f, fake, batch)));
}

FeatureExtractor probe_features(const IdentityEncoder& encoder) {
  return [encoder](const torch::Tensor& x) { return encoder.features(x); };
}

double identity_similarity(const IdentityEncoder& encoder, const torch::Tensor& a, const torch::Tensor& b,
                           std::int64_t batch) {
  auto x = batched(a), y = batched(b);
  check_pair_counts(x, y);
  torch::NoGradGuard ng;
  auto ea = chunked(x, batch, [&](const torch::Tensor& c) { return encoder.encode(c).to(torch::kFloat64); });
  auto eb = chunked(y, batch, [&](const torch::Tensor& c) { return encoder.encode(c).to(torch::kFloat64); });
  return torch::cosine_similarity(ea, eb, 1).mean().item<double>();
}

// ---------------------------------------------------------------- probes

namespace {

const std::vector<std::int64_t> kProbeChannels{16, 32, 48, 64, 96};
constexpr double kYawScale = 45.0;

std::shared_ptr<ConvTrunk> make_probe(std::int64_t resolution, std::uint64_t seed) {
  if (!procfaces::supported_resolution(resolution) || resolution < 32)
    throw ConfigError("factor probe needs resolution >= 32");
  auto gen = torch_generator(seed);
  const auto side = resolution >> (kProbeChannels.size() - 1);
  auto net = std::make_shared<ConvTrunk>(kProbeChannels, 2, 2, side, gen);
  torch::NoGradGuard ng;
  net->head->weight.mul_(0.1);
  return net;
}

}  // namespace

FactorProbe::FactorProbe(std::int64_t resolution, std::uint64_t seed)
    : resolution_(resolution), seed_(seed), net_(make_probe(resolution, seed)) {}

torch::Tensor FactorProbe::predict(const torch::Tensor& images) const {
  if (!net_) throw StateError("factor probe is not loaded");
  auto x = batched(images);
  if (x.dim() != 4 || x.size(2) != resolution_ || x.size(3) != resolution_)
    throw ShapeError("factor probe expects " + std::to_string(resolution_) + "px images");
  auto raw = static_cast<ConvTrunk&>(*net_).forward(x);
  return raw * torch::tensor({kYawScale, 1.0}, raw.options());
}

std::vector<torch::Tensor> FactorProbe::parameters() const {
  if (!net_) throw StateError("factor probe is not loaded");
  return net_->parameters();
}

std::uint64_t FactorProbe::fingerprint() const {
  if (!net_) throw StateError("factor probe is not loaded");
  return xswap::fingerprint(*net_);
}

void FactorProbe::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
}

void FactorProbe::save(const std::filesystem::path& path) const {
  if (!net_) throw StateError("factor probe is not loaded");
  ParamBundle b;
  b.resolution = static_cast<std::uint32_t>(resolution_);
  b.add("probe.meta.seed", pack_u64(seed_));
  export_module(*net_, "probe.", b);
  write_container(path, kEncoderMagic, b);
}

FactorProbe FactorProbe::load(const std::filesystem::path& path) {
  auto b = read_container(path, kEncoderMagic);
  FactorProbe p(b.resolution, unpack_u64(b.get("probe.meta.seed")));
  import_module(*p.net_, "probe.", b);
  p.freeze();
  return p;
}

torch::Tensor factor_labels(std::span<const FaceMeta> meta) {
  std::vector<float> v;
  for (const auto& m : meta) {
    v.push_back(static_cast<float>(m.attributes.yaw));
    v.push_back(static_cast<float>(m.attributes.mouth_curve));
  }
  return torch::tensor(v).view({static_cast<std::int64_t>(meta.size()), 2});
}

torch::Tensor factor_labels(const procfaces::Corpus& corpus) {
  std::vector<FaceMeta> meta;
  for (const auto& e : corpus.entries) meta.push_back({e.identity, e.attributes});
  return factor_labels(meta);
}

ProbeResult train_factor_probes(const procfaces::Corpus& corpus, const ProbeConfig& cfg) {
  if (corpus.entries.empty()) throw ArgumentError("factor probes need a nonempty corpus");
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("factor probes: bad batch or step count");
  ProbeResult r{FactorProbe(corpus.resolution, derive_seed(cfg.seed, 1))};
  const auto images = corpus.images();
  const auto labels = factor_labels(corpus);
  const auto scale = torch::tensor({1.0 / 30.0, 1.0}, torch::kFloat32);
  std::vector<std::int64_t> train_idx, test_idx;
  split_by_identity(corpus, cfg.held_out, train_idx, test_idx);

  torch::optim::Adam opt(r.probe.parameters(), torch::optim::AdamOptions(cfg.lr));
  BatchSampler sampler(train_idx, derive_seed(cfg.seed, 2));
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    optim::set_lr(opt, optim::cosine_lr(cfg.lr, step, cfg.steps));
    auto idx = sampler.next(cfg.batch);
    auto loss = ((r.probe.predict(take(images, idx)) - take(labels, idx)) * scale).pow(2).mean();
    if (!std::isfinite(loss.item<double>())) throw TrainingError("factor probe diverged", step);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  r.probe.freeze();
  if (!test_idx.empty()) {
    torch::NoGradGuard ng;
    auto x = take(images, test_idx);
    auto err = chunked(x, 100, [&](const torch::Tensor& c) { return r.probe.predict(c); }) - take(labels, test_idx);
    auto mae = err.abs().mean(0);
    r.yaw_mae = mae[0].item<double>();
    r.mouth_mae = mae[1].item<double>();
  }
  return r;
}

namespace {

PoseExprError compare(const torch::Tensor& want, const torch::Tensor& got) {
  auto mae = (want.to(torch::kFloat64) - got.to(torch::kFloat64)).abs().mean(0);
  return {mae[0].item<double>(), mae[1].item<double>()};
}

torch::Tensor probe_all(const FactorProbe& probe, const torch::Tensor& x) {
  torch::NoGradGuard ng;
  return chunked(x, 100, [&](const torch::Tensor& c) { return probe.predict(c); });
}

}  // namespace

PoseExprError pose_expr_error(const FactorProbe& probe, const torch::Tensor& targets, const torch::Tensor& swapped) {
  auto t = batched(targets), s = batched(swapped);
  check_pair_counts(t, s);
  return compare(probe_all(probe, t), probe_all(probe, s));
}

PoseExprError pose_expr_error(const FactorProbe& probe, std::span<const FaceMeta> targets,
                              const torch::Tensor& swapped) {
  auto s = batched(swapped);
  if (static_cast<std::int64_t>(targets.size()) != s.size(0))
    throw ArgumentError("pose_expr_error: one metadata record per swapped image");
  if (targets.empty()) throw ArgumentError("empty image set");
  return compare(factor_labels(targets), probe_all(probe, s));
}

// ---------------------------------------------------------------- reports

std::string eval_tsv_header() { return "step\tid_similarity\tpose_error\texpr_error\tfid\tpairs\treals"; }

std::string eval_tsv_row(const EvalReport& r) {
  std::ostringstream s;
  s << std::setprecision(9) << r.step << '\t' << r.id_similarity << '\t' << r.pose_error << '\t' << r.expr_error
    << '\t' << r.fid << '\t' << r.pairs << '\t' << r.reals;
  return s.str();
}

void append_eval_report(const std::filesystem::path& path, const EvalReport& r) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (fresh) f << eval_tsv_header() << '\n';
  f << eval_tsv_row(r) << '\n';
  if (!f) throw IoError("cannot write " + path.string());
}

void write_swap_montage(const std::filesystem::path& path, const torch::Tensor& sources, const torch::Tensor& targets,
                        const torch::Tensor& swaps) {
  auto s = batched(sources), t = batched(targets), w = batched(swaps);
  check_pair_counts(s, t);
  check_pair_counts(s, w);
  std::vector<Image> tiles;
  for (const auto* row : {&s, &t, &w})
    for (std::int64_t i = 0; i < s.size(0); ++i) tiles.push_back((*row)[i].detach());
  write_png(path, montage(tiles, s.size(0)));
}

// ---------------------------------------------------------------- swap evaluation

std::vector<PairSample> eval_pairs(const SwapDataset& held_out, std::int64_t n, std::uint64_t seed) {
  const auto m = static_cast<std::uint64_t>(held_out.size());
  if (m < 2) throw ArgumentError("evaluation needs at least two held-out records");
  Rng rng(derive_seed(seed, 0xE7));
  std::vector<PairSample> out;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto s = rng.below(m);
    auto t = rng.below(m - 1);
    if (t >= s) ++t;
    out.push_back({static_cast<std::int64_t>(s), static_cast<std::int64_t>(t), false});
  }
  return out;
}

namespace {

struct PairImages {
  torch::Tensor sources, targets;
};

PairImages pair_images(const SwapDataset& ds, const std::vector<PairSample>& pairs) {
  std::vector<std::int64_t> s, t;
  for (const auto& p : pairs) {
    s.push_back(p.source);
    t.push_back(p.target);
  }
  return {ds.image_batch(s), ds.image_batch(t)};
}

torch::Tensor run_swaps(const FrozenParts& frozen, const SwapNets& nets, const torch::Tensor& sources,
                        const torch::Tensor& targets, std::int64_t batch) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < sources.size(0); i += batch) {
    const auto e = std::min(i + batch, sources.size(0));
    out.push_back(swap(frozen, nets, sources.slice(0, i, e), targets.slice(0, i, e)));
  }
  return torch::cat(out);
}

}  // namespace

SwapEval evaluate_swaps(const FrozenParts& frozen, const SwapNets& nets, const FactorProbe& probe,
                        const SwapDataset& held_out, const torch::Tensor& reals, const SwapEvalConfig& cfg) {
  if (cfg.pairs < 2) throw ConfigError("evaluation needs at least two pairs");
  const auto pairs = eval_pairs(held_out, cfg.pairs, cfg.seed);
  const auto [src, tgt] = pair_images(held_out, pairs);
  const auto out = run_swaps(frozen, nets, src, tgt, cfg.batch);

  SwapEval e;
  e.report.pairs = cfg.pairs;
  e.report.reals = reals.size(0);
  e.report.id_similarity = identity_similarity(frozen.identity, src, out, cfg.batch);
  e.id_to_target = identity_similarity(frozen.identity, tgt, out, cfg.batch);
  const auto vs_target = pose_expr_error(probe, tgt, out);
  const auto vs_source = pose_expr_error(probe, src, out);
  e.report.pose_error = vs_target.pose;
  e.report.expr_error = vs_target.expr;
  e.pose_vs_source = vs_source.pose;
  e.expr_vs_source = vs_source.expr;
  e.report.fid = fid(reals, out, probe_features(frozen.identity), cfg.batch);

  const auto self = run_swaps(frozen, nets, tgt, tgt, cfg.batch);
  const int scales = losses::max_scales(tgt.size(2));
  {
    torch::NoGradGuard ng;
    e.self_ms_ssim = losses::ms_ssim(self.to(torch::kFloat64), tgt.to(torch::kFloat64), scales).item<double>();
  }
  const auto k = std::min<std::int64_t>(8, cfg.pairs);
  e.sources = src.slice(0, 0, k);
  e.targets = tgt.slice(0, 0, k);
  e.swaps = out.slice(0, 0, k);
  return e;
}

double swap_fid(const FrozenParts& frozen, const SwapNets& nets, const SwapDataset& held_out,
                const torch::Tensor& reals, const SwapEvalConfig& cfg) {
  const auto pairs = eval_pairs(held_out, cfg.pairs, cfg.seed);
  const auto [src, tgt] = pair_images(held_out, pairs);
  return fid(reals, run_swaps(frozen, nets, src, tgt, cfg.batch), probe_features(frozen.identity), cfg.batch);
}

}  // namespace xswap::eval
