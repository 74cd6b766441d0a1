#include "xswap/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "xswap/checkpoint.hpp"
#include "xswap/error.hpp"
#include "xswap/optim.hpp"
#include "xswap/rng.hpp"

namespace xswap {

void TrainConfig::validate() const {
  if (!(lr_nonadv >= 0.0) || !(lr_adv >= 0.0)) throw ConfigError("learning rates must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(p_same >= 0.0 && p_same <= 1.0)) throw ConfigError("p_same must lie in [0, 1]");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  weights.validate();
  num_styles(resolution);
}

namespace {

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

void check_images(const torch::Tensor& x, std::int64_t res, const char* what) {
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != res || x.size(3) != res)
    throw ShapeError(std::string(what) + " must be [N, 3, " + std::to_string(res) + ", " + std::to_string(res) + "]");
}

}  // namespace

torch::Tensor swap_styles(const FrozenParts& frozen, const SwapNets& nets, const torch::Tensor& source,
                          const torch::Tensor& target) {
  const auto res = frozen.generator.resolution();
  auto s = batched(source), t = batched(target);
  check_images(s, res, "swap source");
  check_images(t, res, "swap target");
  if (s.size(0) != t.size(0)) throw ShapeError("swap: source and target batch sizes differ");
  auto mapper = nets.mapper;  // holder copy shares the module
  return mapper->forward(concat_codes(frozen.identity.encode(s), nets.attr.encode(t)));
}

torch::Tensor swap(const FrozenParts& frozen, const SwapNets& nets, const torch::Tensor& source,
                   const torch::Tensor& target) {
  return frozen.generator.synthesize(swap_styles(frozen, nets, source, target));
}

Trainer::Trainer(const TrainConfig& cfg, std::shared_ptr<const FrozenParts> frozen, SwapDataset train_set)
    : cfg_(cfg), frozen_(std::move(frozen)), data_(std::move(train_set)) {
  cfg_.validate();
  if (!frozen_ || !frozen_->generator.initialized() || !frozen_->identity.initialized())
    throw StateError("training needs a loaded generator and identity encoder");
  if (!frozen_->landmarks.configured()) throw StateError("training needs a landmark provider");
  if (!frozen_->landmarks.provider().uses_pixels())
    throw ConfigError("training needs a pixel-based landmark provider for generated outputs");
  if (frozen_->generator.resolution() != cfg_.resolution)
    throw ConfigError("generator resolution does not match the training resolution");
  if (!frozen_->generator.frozen() || !frozen_->identity.frozen())
    throw StateError("generator and identity encoder must be frozen before training");
  if (data_.size() == 0) throw ArgumentError("empty training set");
  if (data_.resolution != cfg_.resolution) throw ConfigError("dataset resolution does not match the training resolution");

  auto attr_cfg = cfg_.attr;
  attr_cfg.seed = derive_seed(cfg_.seed, 0xA7);
  nets_.attr = AttributeEncoder(attr_cfg);
  nets_.mapper = LatentMapper(MapperConfig{cfg_.resolution, cfg_.per_row_heads, derive_seed(cfg_.seed, 0x3A)});
  if (cfg_.mapper_init_wavg) {
    torch::NoGradGuard ng;
    if (nets_.mapper->row_heads.empty()) {
      nets_.mapper->head->weight.mul_(cfg_.mapper_head_scale);
    } else {
      for (auto& h : nets_.mapper->row_heads) h->weight.mul_(cfg_.mapper_head_scale);
    }
    nets_.mapper->set_output_bias(frozen_->generator.w_avg().detach());
  }
  nets_.disc = WplusDiscriminator(cfg_.resolution, derive_seed(cfg_.seed, 0xD5));

  const auto betas = std::make_tuple(cfg_.beta1, cfg_.beta2);
  opt_nonadv_ = std::make_unique<torch::optim::Adam>(nonadv_params(), torch::optim::AdamOptions(cfg_.lr_nonadv).betas(betas));
  opt_d_ = std::make_unique<torch::optim::Adam>(nets_.disc->parameters(), torch::optim::AdamOptions(cfg_.lr_adv).betas(betas));
  auto g_params = nets_.mapper->parameters();
  if (cfg_.adv_updates_encoder)
    for (auto& p : nets_.attr.parameters()) g_params.push_back(p);
  opt_g_ = std::make_unique<torch::optim::Adam>(g_params, torch::optim::AdamOptions(cfg_.lr_adv).betas(betas));

  gen_fp_ = frozen_->generator_fingerprint();
  id_fp_ = frozen_->identity_fingerprint();
}

std::vector<torch::Tensor> Trainer::nonadv_params() const {
  auto p = nets_.attr.parameters();
  for (auto& m : nets_.mapper->parameters()) p.push_back(m);
  return p;
}

torch::Tensor Trainer::codes(const torch::Tensor& source, const torch::Tensor& target) const {
  torch::Tensor id;
  {
    torch::NoGradGuard ng;
    id = frozen_->identity.encode(source);
  }
  return concat_codes(id, nets_.attr.encode(target));
}

losses::LossReport Trainer::nonadv_step(const std::vector<PairSample>& pairs) {
  if (pairs.empty()) throw ArgumentError("nonadv_step: empty batch");
  std::vector<std::int64_t> src_idx, tgt_idx;
  std::vector<bool> same;
  for (const auto& p : pairs) {
    src_idx.push_back(p.source);
    tgt_idx.push_back(p.target);
    same.push_back(p.same);
  }
  auto src = data_.image_batch(src_idx), tgt = data_.image_batch(tgt_idx);
  const auto& fz = *frozen_;

  auto styles = nets_.mapper->forward(codes(src, tgt));
  auto out = fz.generator.synthesize(styles);
  torch::Tensor src_emb, tgt_lm;
  {
    torch::NoGradGuard ng;
    src_emb = fz.identity.encode(src);
    tgt_lm = fz.landmarks(tgt);
  }
  losses::LossTerms terms;
  terms.id = losses::id_loss(src_emb, fz.identity.encode(out));
  terms.lnd = losses::landmark_loss(tgt_lm, fz.landmarks(out));
  terms.rec = losses::rec_loss(tgt, out, same, cfg_.weights.alpha);
  auto total = losses::total_loss(terms, cfg_.weights);

  losses::LossReport r;
  r.step = step_;
  r.set("id", terms.id.item<double>());
  r.set("lnd", terms.lnd.item<double>());
  r.set("rec", terms.rec.item<double>());
  r.total = total.item<double>();
  if (!std::isfinite(r.total)) throw TrainingError("non-adversarial loss is not finite", step_);

  opt_nonadv_->zero_grad();
  total.backward();
  const auto params = nonadv_params();
  r.set("grad_norm", optim::clip_grad_norm(params, cfg_.clip_norm));
  opt_nonadv_->step();
  return r;
}

losses::LossReport Trainer::adv_step(const std::vector<PairSample>& pairs, const torch::Tensor& real_wplus) {
  if (pairs.empty()) throw ArgumentError("adv_step: empty batch");
  check_styles(real_wplus, cfg_.resolution);
  std::vector<std::int64_t> src_idx, tgt_idx;
  for (const auto& p : pairs) {
    src_idx.push_back(p.source);
    tgt_idx.push_back(p.target);
  }
  auto src = data_.image_batch(src_idx), tgt = data_.image_batch(tgt_idx);
  losses::LossReport r;
  r.step = step_;
  auto& disc = nets_.disc;

  // Discriminator phase: mapper outputs are constants here.
  {
    torch::Tensor fake;
    {
      torch::NoGradGuard ng;
      fake = nets_.mapper->forward(codes(src, tgt));
    }
    opt_d_->zero_grad();
    auto real_logits = disc->forward(real_wplus), fake_logits = disc->forward(fake);
    auto d_loss = losses::adv_d_loss(real_logits, fake_logits);
    auto r1 = losses::r1_penalty([&](const torch::Tensor& x) { return disc->forward(x); }, real_wplus,
                                 cfg_.weights.r1_gamma);
    r.set("d_loss", d_loss.item<double>());
    r.set("r1", r1.item<double>());
    r.set("d_real", real_logits.mean().item<double>());
    r.set("d_fake", fake_logits.mean().item<double>());
    auto loss = d_loss + r1;
    if (!std::isfinite(loss.item<double>())) throw TrainingError("discriminator loss is not finite", step_);
    loss.backward();
    if (cfg_.clip_norm > 0.0) optim::clip_grad_norm(disc->parameters(), cfg_.clip_norm);
    opt_d_->step();
  }
  // Mapper phase.
  {
    opt_g_->zero_grad();
    auto g_loss = losses::adv_g_loss(disc->forward(nets_.mapper->forward(codes(src, tgt))));
    r.set("g_adv", g_loss.item<double>());
    if (!std::isfinite(g_loss.item<double>())) throw TrainingError("adversarial mapper loss is not finite", step_);
    (cfg_.weights.lambda_adv * g_loss).backward();
    std::vector<torch::Tensor> params;
    for (const auto& g : opt_g_->param_groups())
      for (const auto& p : g.params()) params.push_back(p);
    if (cfg_.clip_norm > 0.0) optim::clip_grad_norm(params, cfg_.clip_norm);
    opt_g_->step();
  }
  // Gradients that leaked into the discriminator are discarded.
  opt_d_->zero_grad();
  return r;
}

std::vector<PairSample> Trainer::pairs_for_step(std::int64_t step) const {
  Rng rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step), 1));
  return sample_pairs(data_, cfg_.p_same, rng, cfg_.batch);
}

torch::Tensor Trainer::real_wplus_for_step(std::int64_t step) const {
  Rng rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step), 2));
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < cfg_.batch; ++i) idx.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(data_.size()))));
  return data_.latent_batch(idx);
}

losses::LossReport Trainer::step() {
  const auto pairs = pairs_for_step(step_);
  auto report = nonadv_step(pairs);
  if (cfg_.adversarial) {
    auto adv = adv_step(pairs, real_wplus_for_step(step_));
    for (const auto& [k, v] : adv.terms) report.set(k, v);
  }
  ++step_;
  return report;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  if (frozen_->generator_fingerprint() != gen_fp_) throw StateError("generator parameters changed during training");
  if (frozen_->identity_fingerprint() != id_fp_) throw StateError("identity encoder parameters changed during training");
  ParamBundle b;
  b.resolution = static_cast<std::uint32_t>(cfg_.resolution);
  b.add("state.step", pack_u64(static_cast<std::uint64_t>(step_)));
  b.add("state.generator_fingerprint", pack_u64(gen_fp_));
  b.add("state.identity_fingerprint", pack_u64(id_fp_));
  nets_.attr.export_params(b, "attr.");
  export_mapper(nets_.mapper, b, "map.");
  export_discriminator(nets_.disc, b, "dw.");
  optim::export_adam(*opt_nonadv_, "adam_nonadv.", b);
  optim::export_adam(*opt_d_, "adam_d.", b);
  optim::export_adam(*opt_g_, "adam_g.", b);
  write_container(path, kMapperMagic, b);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  auto b = read_container(path, kMapperMagic);
  if (b.resolution != static_cast<std::uint32_t>(cfg_.resolution))
    throw FormatError("checkpoint resolution " + std::to_string(b.resolution) + " does not match the training resolution");
  if (unpack_u64(b.get("state.generator_fingerprint")) != gen_fp_)
    throw StateError("checkpoint was trained against a different generator");
  if (unpack_u64(b.get("state.identity_fingerprint")) != id_fp_)
    throw StateError("checkpoint was trained against a different identity encoder");
  step_ = static_cast<std::int64_t>(unpack_u64(b.get("state.step")));
  import_module(nets_.attr.module(), "attr.", b);
  import_module(*nets_.mapper, "map.", b);
  import_module(*nets_.disc, "dw.", b);
  optim::import_adam(*opt_nonadv_, "adam_nonadv.", b);
  optim::import_adam(*opt_d_, "adam_d.", b);
  optim::import_adam(*opt_g_, "adam_g.", b);
}

SwapNets load_swap_nets(const std::filesystem::path& path) {
  auto b = read_container(path, kMapperMagic);
  SwapNets n;
  n.attr = AttributeEncoder::from_bundle(b, "attr.");
  n.mapper = import_mapper(b, "map.");
  n.disc = import_discriminator(b, "dw.");
  return n;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  char name[40];
  std::snprintf(name, sizeof name, "swap_step%08lld.xswm", static_cast<long long>(step));
  return dir / name;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  static const std::regex pat(R"(swap_step(\d{8})\.xswm)");
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

namespace {

// Keep the header and rows with step < keep_below.
void truncate_log(const std::filesystem::path& path, std::int64_t keep_below) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::ostringstream kept;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      kept << line << '\n';
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find('\t'))) < keep_below) kept << line << '\n';
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept.str();
  if (!out) throw IoError("cannot rewrite " + path.string());
}

}  // namespace

TrainResult train(const TrainConfig& cfg, std::shared_ptr<const FrozenParts> frozen, const SwapDataset& train_set,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const losses::LossReport&)>& on_step) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  Trainer trainer(cfg, std::move(frozen), train_set);
  const auto log_path = out_dir / "train_log.tsv";
  if (auto p = latest_checkpoint(out_dir); !p.empty()) {
    trainer.load_checkpoint(p);
    truncate_log(log_path, trainer.steps_done());
  } else {
    std::filesystem::remove(log_path);
  }
  TrainResult result;
  if (trainer.steps_done() == 0 && cfg.steps == 0) trainer.save_checkpoint(checkpoint_path(out_dir, 0));
  while (trainer.steps_done() < cfg.steps) {
    auto report = trainer.step();
    losses::append_log(log_path, report);
    if (on_step) on_step(report);
    result.last = report;
    if (trainer.steps_done() % cfg.checkpoint_every == 0 || trainer.steps_done() == cfg.steps)
      trainer.save_checkpoint(checkpoint_path(out_dir, trainer.steps_done()));
  }
  result.steps = trainer.steps_done();
  result.final_checkpoint = checkpoint_path(out_dir, trainer.steps_done());
  if (!std::filesystem::exists(result.final_checkpoint)) trainer.save_checkpoint(result.final_checkpoint);
  return result;
}

}  // namespace xswap
