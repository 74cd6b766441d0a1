#include "xswap/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "conv_trunk.hpp"
#include "sampling.hpp"

using xswap::detail::BatchSampler;
using xswap::detail::take;
#include "xswap/error.hpp"
#include "xswap/layers.hpp"
#include "xswap/optim.hpp"
#include "xswap/rng.hpp"

namespace xswap {

using layers::EqualConv2d;
using layers::EqualLinear;

std::int64_t token_count(std::int64_t side, std::int64_t patch, std::int64_t stride) {
  if (patch < 1 || stride < 1 || stride > patch || patch > side || (side - patch) % stride != 0)
    throw ShapeError("patch " + std::to_string(patch) + " / stride " + std::to_string(stride) +
                     " do not tile side " + std::to_string(side));
  const auto per_side = (side - patch) / stride + 1;
  return per_side * per_side;
}

torch::Tensor extract_patches(const torch::Tensor& images, std::int64_t patch, std::int64_t stride) {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (x.dim() != 4) throw ShapeError("extract_patches expects [N, C, H, W]");
  token_count(x.size(2), patch, stride);
  token_count(x.size(3), patch, stride);
  // [N, C, Th, Tw, P, P] -> [N, Th, Tw, C, P, P]
  auto u = x.unfold(2, patch, stride).unfold(3, patch, stride).permute({0, 2, 3, 1, 4, 5});
  return u.reshape({x.size(0), u.size(1) * u.size(2), x.size(1) * patch * patch});
}

namespace {

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

struct LayerNormImpl : torch::nn::Module {
  explicit LayerNormImpl(std::int64_t dim) : dim(dim) {
    weight = register_parameter("weight", torch::ones({dim}));
    bias = register_parameter("bias", torch::zeros({dim}));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    return torch::layer_norm(x, {dim}, weight, bias, 1e-5);
  }
  std::int64_t dim;
  torch::Tensor weight, bias;
};
TORCH_MODULE(LayerNorm);

struct BlockImpl : torch::nn::Module {
  BlockImpl(std::int64_t width, std::int64_t heads, at::Generator& gen) : heads(heads) {
    ln1 = register_module("ln1", LayerNorm(width));
    qkv = register_module("qkv", EqualLinear(width, 3 * width, gen));
    out = register_module("out", EqualLinear(width, width, gen));
    ln2 = register_module("ln2", LayerNorm(width));
    fc1 = register_module("fc1", EqualLinear(width, 4 * width, gen));
    fc2 = register_module("fc2", EqualLinear(4 * width, width, gen));
    // Residual branches start small.
    torch::NoGradGuard ng;
    out->weight.mul_(0.1);
    fc2->weight.mul_(0.1);
  }

  torch::Tensor forward(torch::Tensor x) {
    const auto n = x.size(0), t = x.size(1), c = x.size(2), d = c / heads;
    auto h = qkv->forward(ln1->forward(x)).view({n, t, 3, heads, d}).permute({2, 0, 3, 1, 4});
    auto q = h[0], k = h[1], v = h[2];
    auto att = torch::softmax(q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d)), -1);
    auto y = att.matmul(v).transpose(1, 2).reshape({n, t, c});
    x = x + out->forward(y);
    return x + fc2->forward(torch::gelu(fc1->forward(ln2->forward(x))));
  }

  std::int64_t heads;
  LayerNorm ln1{nullptr}, ln2{nullptr};
  EqualLinear qkv{nullptr}, out{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Block);

IdentityEncoderConfig validated(IdentityEncoderConfig cfg) {
  token_count(cfg.resolution, cfg.patch, cfg.stride);
  if (cfg.width < 1 || cfg.heads < 1 || cfg.width % cfg.heads != 0)
    throw ConfigError("identity encoder width must be a positive multiple of heads");
  if (cfg.depth < 1) throw ConfigError("identity encoder needs at least one block");
  return cfg;
}

}  // namespace

struct IdentityNet : torch::nn::Module {
  explicit IdentityNet(const IdentityEncoderConfig& c) : config(validated(c)) {
    auto gen = torch_generator(config.seed);
    const auto t = token_count(config.resolution, config.patch, config.stride);
    proj = register_module("proj", EqualLinear(3 * config.patch * config.patch, config.width, gen));
    pos = register_parameter("pos", torch::randn({1, t, config.width}, gen) * 0.02);
    for (std::int64_t i = 0; i < config.depth; ++i)
      blocks.push_back(register_module("block" + std::to_string(i), Block(config.width, config.heads, gen)));
    ln = register_module("ln", LayerNorm(config.width));
    head = register_module("head", EqualLinear(config.width, kIdDim, gen));
  }

  torch::Tensor tokens(const torch::Tensor& x) {
    return proj->forward(extract_patches(x, config.patch, config.stride));
  }

  // Pooled token features before the embedding head, [N, width].
  torch::Tensor pooled(const torch::Tensor& x) {
    auto h = tokens(x) + pos;
    for (auto& b : blocks) h = b->forward(h);
    return ln->forward(h).mean(1);
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto e = head->forward(pooled(x));
    return e / e.norm(2, 1, true).clamp_min(1e-12);
  }

  IdentityEncoderConfig config;
  EqualLinear proj{nullptr}, head{nullptr};
  torch::Tensor pos;
  std::vector<Block> blocks;
  LayerNorm ln{nullptr};
};

IdentityEncoder::IdentityEncoder(const IdentityEncoderConfig& config)
    : net_(std::make_shared<IdentityNet>(config)) {}

const IdentityNet& IdentityEncoder::net() const {
  if (!net_) throw StateError("identity encoder is not loaded");
  return *net_;
}

const IdentityEncoderConfig& IdentityEncoder::config() const { return net().config; }

torch::Tensor IdentityEncoder::patch_tokens(const torch::Tensor& images) const {
  net();
  return net_->tokens(batched(images));
}

torch::Tensor IdentityEncoder::encode(const torch::Tensor& images) const {
  const auto& cfg = net().config;
  auto x = batched(images);
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != cfg.resolution || x.size(3) != cfg.resolution)
    throw ShapeError("identity encoder expects [N, 3, " + std::to_string(cfg.resolution) + ", " +
                     std::to_string(cfg.resolution) + "]");
  return net_->forward(x);
}

torch::Tensor IdentityEncoder::features(const torch::Tensor& images) const {
  const auto& cfg = net().config;
  auto x = batched(images);
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != cfg.resolution || x.size(3) != cfg.resolution)
    throw ShapeError("identity encoder expects [N, 3, " + std::to_string(cfg.resolution) + ", " +
                     std::to_string(cfg.resolution) + "]");
  return net_->pooled(x);
}

void IdentityEncoder::freeze() {
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

bool IdentityEncoder::frozen() const {
  for (const auto& p : net().parameters())
    if (p.requires_grad()) return false;
  return true;
}

void IdentityEncoder::to(torch::Dtype dtype) { net_->to(dtype); }
std::uint64_t IdentityEncoder::fingerprint() const { return xswap::fingerprint(net()); }
std::vector<torch::Tensor> IdentityEncoder::parameters() const { return net().parameters(); }
torch::nn::Module& IdentityEncoder::module() {
  net();
  return *net_;
}

void IdentityEncoder::export_params(ParamBundle& bundle, const std::string& prefix) const {
  const auto& c = net().config;
  bundle.resolution = static_cast<std::uint32_t>(c.resolution);
  bundle.add(prefix + "meta.resolution", pack_u64(static_cast<std::uint64_t>(c.resolution)));
  bundle.add(prefix + "meta.patch", pack_u64(static_cast<std::uint64_t>(c.patch)));
  bundle.add(prefix + "meta.stride", pack_u64(static_cast<std::uint64_t>(c.stride)));
  bundle.add(prefix + "meta.width", pack_u64(static_cast<std::uint64_t>(c.width)));
  bundle.add(prefix + "meta.depth", pack_u64(static_cast<std::uint64_t>(c.depth)));
  bundle.add(prefix + "meta.heads", pack_u64(static_cast<std::uint64_t>(c.heads)));
  bundle.add(prefix + "meta.seed", pack_u64(c.seed));
  export_module(*net_, prefix, bundle);
}

IdentityEncoder IdentityEncoder::from_bundle(const ParamBundle& bundle, const std::string& prefix) {
  auto u = [&](const char* k) { return static_cast<std::int64_t>(unpack_u64(bundle.get(prefix + "meta." + k))); };
  IdentityEncoderConfig c;
  c.resolution = u("resolution");
  c.patch = u("patch");
  c.stride = u("stride");
  c.width = u("width");
  c.depth = u("depth");
  c.heads = u("heads");
  c.seed = unpack_u64(bundle.get(prefix + "meta.seed"));
  IdentityEncoder e;
  e.net_ = std::make_shared<IdentityNet>(c);
  import_module(*e.net_, prefix, bundle);
  return e;
}

void IdentityEncoder::save(const std::filesystem::path& path) const {
  ParamBundle b;
  export_params(b);
  write_container(path, kEncoderMagic, b);
}

IdentityEncoder IdentityEncoder::load(const std::filesystem::path& path) {
  return from_bundle(read_container(path, kEncoderMagic));
}

AttributeEncoder::AttributeEncoder(const AttributeEncoderConfig& config) : config_(config) {
  auto gen = torch_generator(config.seed);
  net_ = std::make_shared<ConvTrunk>(config.channels, config.expand, kAttrDim, 0, gen);
}

const ConvTrunk& AttributeEncoder::net() const {
  if (!net_) throw StateError("attribute encoder is not initialized");
  return *net_;
}

torch::Tensor AttributeEncoder::encode(const torch::Tensor& images) const {
  net();
  auto x = batched(images);
  if (x.dim() != 4 || x.size(1) != 3) throw ShapeError("attribute encoder expects [N, 3, H, W]");
  return net_->forward(x);
}

void AttributeEncoder::to(torch::Dtype dtype) { net_->to(dtype); }
std::uint64_t AttributeEncoder::fingerprint() const { return xswap::fingerprint(net()); }
std::vector<torch::Tensor> AttributeEncoder::parameters() const { return net().parameters(); }
torch::nn::Module& AttributeEncoder::module() {
  net();
  return *net_;
}

void AttributeEncoder::export_params(ParamBundle& bundle, const std::string& prefix) const {
  net();
  bundle.add(prefix + "meta.channels",
             torch::tensor(std::vector<float>(config_.channels.begin(), config_.channels.end())));
  bundle.add(prefix + "meta.expand", pack_u64(static_cast<std::uint64_t>(config_.expand)));
  bundle.add(prefix + "meta.seed", pack_u64(config_.seed));
  export_module(*net_, prefix, bundle);
}

AttributeEncoder AttributeEncoder::from_bundle(const ParamBundle& bundle, const std::string& prefix) {
  AttributeEncoderConfig c;
  auto ch = bundle.get(prefix + "meta.channels").to(torch::kFloat64);
  c.channels.clear();
  for (std::int64_t i = 0; i < ch.numel(); ++i) c.channels.push_back(static_cast<std::int64_t>(ch[i].item<double>()));
  c.expand = static_cast<std::int64_t>(unpack_u64(bundle.get(prefix + "meta.expand")));
  c.seed = unpack_u64(bundle.get(prefix + "meta.seed"));
  AttributeEncoder e(c);
  import_module(*e.net_, prefix, bundle);
  return e;
}

void AttributeEncoder::save(const std::filesystem::path& path) const {
  ParamBundle b;
  export_params(b);
  write_container(path, kEncoderMagic, b);
}

AttributeEncoder AttributeEncoder::load(const std::filesystem::path& path) {
  return from_bundle(read_container(path, kEncoderMagic));
}

torch::Tensor OracleLandmarks::landmarks(const torch::Tensor& images, std::span<const FaceMeta> meta) const {
  if (meta.empty()) throw ArgumentError("oracle landmarks need face metadata");
  std::int64_t res = 64;
  auto dtype = torch::kFloat64;
  if (images.defined()) {
    auto x = batched(images);
    if (x.size(0) != static_cast<std::int64_t>(meta.size()))
      throw ShapeError("oracle landmarks: one metadata record per image");
    res = x.size(2);
    dtype = x.scalar_type();
  }
  std::vector<torch::Tensor> out;
  out.reserve(meta.size());
  for (const auto& m : meta) out.push_back(procfaces::landmarks_oracle(m.identity, m.attributes, res));
  return torch::stack(out).to(dtype);
}

namespace {

const std::vector<std::int64_t> kRegressorChannels{16, 32, 48, 64, 96};

std::shared_ptr<ConvTrunk> make_regressor(std::int64_t resolution, std::uint64_t seed) {
  if (!procfaces::supported_resolution(resolution) || resolution < 32)
    throw ConfigError("landmark regressor needs resolution >= 32");
  auto gen = torch_generator(seed);
  const auto side = resolution >> (kRegressorChannels.size() - 1);
  auto net = std::make_shared<ConvTrunk>(kRegressorChannels, 2, 2 * procfaces::kNumLandmarks, side, gen);
  torch::NoGradGuard ng;
  net->head->weight.mul_(0.1);
  return net;
}

}  // namespace

LandmarkRegressor::LandmarkRegressor(std::int64_t resolution, std::uint64_t seed)
    : resolution_(resolution), seed_(seed), net_(make_regressor(resolution, seed)) {}

torch::Tensor LandmarkRegressor::predict(const torch::Tensor& images) const {
  if (!net_) throw StateError("landmark regressor is not loaded");
  auto x = batched(images);
  if (x.dim() != 4 || x.size(2) != resolution_ || x.size(3) != resolution_)
    throw ShapeError("landmark regressor expects " + std::to_string(resolution_) + "px images");
  auto raw = static_cast<ConvTrunk&>(*net_).forward(x).view({x.size(0), procfaces::kNumLandmarks, 2});
  const double half = static_cast<double>(resolution_) / 2.0;
  return half + half * raw;
}

torch::Tensor LandmarkRegressor::landmarks(const torch::Tensor& images, std::span<const FaceMeta>) const {
  return predict(images);
}

void LandmarkRegressor::freeze() {
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

std::vector<torch::Tensor> LandmarkRegressor::parameters() const {
  if (!net_) throw StateError("landmark regressor is not loaded");
  return net_->parameters();
}

std::uint64_t LandmarkRegressor::fingerprint() const {
  if (!net_) throw StateError("landmark regressor is not loaded");
  return xswap::fingerprint(*net_);
}

torch::nn::Module& LandmarkRegressor::module() {
  if (!net_) throw StateError("landmark regressor is not loaded");
  return *net_;
}

void LandmarkRegressor::save(const std::filesystem::path& path) const {
  if (!net_) throw StateError("landmark regressor is not loaded");
  ParamBundle b;
  b.resolution = static_cast<std::uint32_t>(resolution_);
  b.add("lm.meta.seed", pack_u64(seed_));
  export_module(*net_, "lm.", b);
  write_container(path, kEncoderMagic, b);
}

LandmarkRegressor LandmarkRegressor::load(const std::filesystem::path& path) {
  auto b = read_container(path, kEncoderMagic);
  LandmarkRegressor r(b.resolution, unpack_u64(b.get("lm.meta.seed")));
  import_module(*r.net_, "lm.", b);
  return r;
}

const LandmarkProvider& Landmarks::provider() const {
  if (!provider_) throw StateError("no landmark provider configured");
  return *provider_;
}

torch::Tensor Landmarks::operator()(const torch::Tensor& images, std::span<const FaceMeta> meta) const {
  return provider().landmarks(images, meta);
}

void split_by_identity(const procfaces::Corpus& corpus, double fraction, std::vector<std::int64_t>& train,
                       std::vector<std::int64_t>& held_out) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("held-out fraction must lie in (0, 1)");
  train.clear();
  held_out.clear();
  std::map<std::int64_t, std::vector<std::int64_t>> by_id;
  for (std::size_t i = 0; i < corpus.entries.size(); ++i)
    by_id[corpus.entries[i].identity.identity_id].push_back(static_cast<std::int64_t>(i));
  for (const auto& [id, idx] : by_id) {
    const auto n = static_cast<std::int64_t>(idx.size());
    auto k = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(fraction * n)));
    if (n < 2) k = 0;
    train.insert(train.end(), idx.begin(), idx.end() - k);
    held_out.insert(held_out.end(), idx.end() - k, idx.end());
  }
}


IdPretrainResult pretrain_identity_encoder(const procfaces::Corpus& corpus, const IdPretrainConfig& cfg) {
  const auto n_ids = corpus.num_identities();
  if (n_ids < 2) throw ArgumentError("identity pretraining needs at least two identities");
  if (cfg.batch < 1 || cfg.steps < 0) throw ConfigError("identity pretraining: bad batch or step count");
  auto enc_cfg = cfg.encoder;
  enc_cfg.resolution = corpus.resolution;
  enc_cfg.seed = derive_seed(cfg.seed, 1);
  IdPretrainResult result{IdentityEncoder(enc_cfg), 0.0, 0.0};
  auto& net = result.encoder.module();

  // Labels are remapped to 0..n_ids-1 in order of first appearance.
  std::map<std::int64_t, std::int64_t> label_of;
  std::vector<std::int64_t> labels_vec;
  for (const auto& e : corpus.entries) {
    auto it = label_of.try_emplace(e.identity.identity_id, static_cast<std::int64_t>(label_of.size())).first;
    labels_vec.push_back(it->second);
  }
  const auto images = corpus.images();
  const auto labels = torch::tensor(labels_vec, torch::kInt64);
  std::vector<std::int64_t> train_idx, test_idx;
  split_by_identity(corpus, cfg.held_out, train_idx, test_idx);

  auto head_gen = torch_generator(derive_seed(cfg.seed, 2));
  auto head = torch::randn({n_ids, kIdDim}, head_gen).requires_grad_(true);
  std::vector<torch::Tensor> params = net.parameters();
  params.push_back(head);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));

  auto cos_logits = [&](const torch::Tensor& emb) {
    return emb.matmul((head / head.norm(2, 1, true)).t());
  };

  BatchSampler sampler(train_idx, derive_seed(cfg.seed, 3));
  double loss_ema = 0.0;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    optim::set_lr(opt, optim::cosine_lr(cfg.lr, step, cfg.steps));
    auto idx = sampler.next(cfg.batch);
    auto x = take(images, idx), y = take(labels, idx);
    auto cos = cos_logits(result.encoder.encode(x));
    auto margin = torch::one_hot(y, n_ids).to(cos.dtype()) * cfg.margin;
    auto loss = torch::nn::functional::cross_entropy(cfg.scale * (cos - margin), y);
    const double lv = loss.item<double>();
    if (!std::isfinite(lv)) throw TrainingError("identity pretraining diverged", step);
    loss_ema = step == 0 ? lv : 0.95 * loss_ema + 0.05 * lv;
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  result.train_loss = loss_ema;

  torch::NoGradGuard ng;
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < test_idx.size(); i += 64) {
    std::vector<std::int64_t> chunk(test_idx.begin() + static_cast<std::ptrdiff_t>(i),
                                    test_idx.begin() + static_cast<std::ptrdiff_t>(std::min(i + 64, test_idx.size())));
    auto pred = cos_logits(result.encoder.encode(take(images, chunk))).argmax(1);
    correct += (pred == take(labels, chunk)).sum().item<std::int64_t>();
  }
  result.held_out_accuracy = test_idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_idx.size());
  result.encoder.freeze();
  return result;
}

LandmarkRegressor train_landmark_regressor(const procfaces::Corpus& corpus, std::int64_t steps,
                                           std::int64_t batch, double lr, std::uint64_t seed,
                                           double held_out, double* held_out_error) {
  if (corpus.entries.empty()) throw ArgumentError("landmark regressor needs a nonempty corpus");
  LandmarkRegressor reg(corpus.resolution, derive_seed(seed, 1));
  const auto images = corpus.images();
  std::vector<torch::Tensor> lm;
  for (const auto& e : corpus.entries)
    lm.push_back(procfaces::landmarks_oracle(e.identity, e.attributes, corpus.resolution).to(torch::kFloat32));
  const auto targets = torch::stack(lm);
  std::vector<std::int64_t> train_idx, test_idx;
  split_by_identity(corpus, held_out, train_idx, test_idx);

  torch::optim::Adam opt(reg.parameters(), torch::optim::AdamOptions(lr));
  BatchSampler sampler(train_idx, derive_seed(seed, 2));
  const double scale = static_cast<double>(corpus.resolution);
  for (std::int64_t step = 0; step < steps; ++step) {
    optim::set_lr(opt, optim::cosine_lr(lr, step, steps));
    auto idx = sampler.next(batch);
    auto diff = (reg.predict(take(images, idx)) - take(targets, idx)) / scale;
    auto loss = diff.pow(2).mean();
    if (!std::isfinite(loss.item<double>())) throw TrainingError("landmark regressor diverged", step);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  if (held_out_error && !test_idx.empty()) {
    torch::NoGradGuard ng;
    auto err = (reg.predict(take(images, test_idx)) - take(targets, test_idx)).norm(2, 2).mean();
    *held_out_error = err.item<double>();
  }
  return reg;
}

}  // namespace xswap
