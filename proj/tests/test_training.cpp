#include "testing.hpp"

#include <filesystem>
#include <fstream>

#include "xswap/error.hpp"
#include "xswap/training.hpp"

using namespace xswap;

namespace {

constexpr std::int64_t kRes = 32;

std::shared_ptr<FrozenParts> tiny_frozen() {
  auto f = std::make_shared<FrozenParts>();
  GeneratorConfig g;
  g.resolution = kRes;
  g.channel_base = 128;
  g.channel_max = 16;
  g.seed = 3;
  f->generator = Generator(g);
  f->generator.update_w_avg(256, 5);
  f->generator.freeze();
  IdentityEncoderConfig ic;
  ic.resolution = kRes;
  ic.width = 32;
  ic.depth = 1;
  ic.heads = 2;
  ic.seed = 4;
  f->identity = IdentityEncoder(ic);
  f->identity.freeze();
  auto lm = std::make_shared<LandmarkRegressor>(kRes, 5);
  lm->freeze();
  f->landmarks = Landmarks(lm);
  return f;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.resolution = kRes;
  c.batch = 4;
  c.steps = 6;
  c.seed = 21;
  c.checkpoint_every = 3;
  c.attr.channels = {8, 8, 12, 16};
  c.attr.expand = 2;
  return c;
}

SwapDataset tiny_data(const FrozenParts& f, std::int64_t n = 8) { return build_dataset(f.generator, n, 77, DatasetConfig{}); }

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

std::vector<torch::Tensor> all_trainable(const SwapNets& n) {
  auto p = n.attr.parameters();
  for (auto& t : n.mapper->parameters()) p.push_back(t);
  for (auto& t : n.disc->parameters()) p.push_back(t);
  return p;
}

std::filesystem::path fresh_dir(const char* name) {
  auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.p_same = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.resolution = 48;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.weights.lambda_id = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("trainer rejects unusable frozen parts") {
  auto f = tiny_frozen();
  auto data = tiny_data(*f);
  auto oracle = std::make_shared<FrozenParts>(*f);
  oracle->landmarks = Landmarks(std::make_shared<OracleLandmarks>());
  CHECK_THROWS_AS(Trainer(tiny_config(), oracle, data), ConfigError);
  auto none = std::make_shared<FrozenParts>(*f);
  none->landmarks = Landmarks();
  CHECK_THROWS_AS(Trainer(tiny_config(), none, data), StateError);
  CHECK_THROWS_AS(Trainer(tiny_config(), f, data.subset({})), ArgumentError);
}

TEST_CASE("swap output shape and mapper initialization at the mean latent") {
  auto f = tiny_frozen();
  Trainer t(tiny_config(), f, tiny_data(*f));
  auto imgs = t.frozen().generator.generate(sample_z(1, 3)).detach();
  auto out = swap(*f, t.nets(), imgs, imgs.flip(0));
  CHECK(out.sizes() == torch::IntArrayRef({3, 3, kRes, kRes}));
  CHECK(swap(*f, t.nets(), imgs[0], imgs[1]).sizes() == torch::IntArrayRef({1, 3, kRes, kRes}));
  CHECK_THROWS_AS(swap(*f, t.nets(), imgs, imgs.slice(0, 0, 2)), ShapeError);

  // Scaled head: styles start near w_avg in every row.
  auto s = swap_styles(*f, t.nets(), imgs, imgs);
  auto wa = f->generator.w_avg().view({1, 1, 512});
  auto rel = (s - wa).norm().item<double>() / (wa.expand_as(s)).norm().item<double>();
  CHECK(rel < 0.5);
}

TEST_CASE("zero learning rates leave every parameter unchanged") {
  auto f = tiny_frozen();
  auto c = tiny_config();
  c.lr_nonadv = 0;
  c.lr_adv = 0;
  Trainer t(c, f, tiny_data(*f));
  auto before = snapshot(all_trainable(t.nets()));
  for (int i = 0; i < 3; ++i) t.step();
  CHECK(same_values(before, snapshot(all_trainable(t.nets()))));
  CHECK(t.steps_done() == 3);
}

TEST_CASE("reconstruction term is exactly zero for unmatched batches") {
  auto f = tiny_frozen();
  Trainer t(tiny_config(), f, tiny_data(*f));
  std::vector<PairSample> pairs{{0, 1, false}, {2, 2, false}, {3, 5, false}};
  auto r = t.nonadv_step(pairs);
  CHECK(r.term("rec") == 0.0);
  CHECK(r.term("id") > 0.0);
  std::vector<PairSample> matched{{0, 0, true}, {2, 2, true}};
  CHECK(t.nonadv_step(matched).term("rec") > 0.0);
}

TEST_CASE("non-adversarial steps overfit a fixed batch") {
  auto f = tiny_frozen();
  auto c = tiny_config();
  c.lr_nonadv = 2e-3;
  c.adversarial = false;
  Trainer t(c, f, tiny_data(*f));
  std::vector<PairSample> pairs{{0, 1, false}, {2, 2, true}, {4, 3, false}, {5, 5, true}};
  const double first = t.nonadv_step(pairs).total;
  double last = first;
  for (int i = 0; i < 40; ++i) last = t.nonadv_step(pairs).total;
  MESSAGE("overfit: " << first << " -> " << last);
  CHECK(last < 0.7 * first);
}

TEST_CASE("discriminator loss is log 2 with a zero head") {
  auto f = tiny_frozen();
  auto c = tiny_config();
  c.weights.r1_gamma = 0;
  Trainer t(c, f, tiny_data(*f));
  {
    torch::NoGradGuard ng;
    t.nets().disc->out->weight.zero_();
    t.nets().disc->out->bias.zero_();
  }
  auto r = t.adv_step(t.pairs_for_step(0), t.real_wplus_for_step(0));
  CHECK(r.term("d_loss") == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(r.term("r1") == 0.0);
  CHECK(r.term("g_adv") == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK_THROWS_AS(t.adv_step(t.pairs_for_step(0), torch::zeros({2, 3, 512})), ShapeError);
}

TEST_CASE("update separation between the three optimizers") {
  auto f = tiny_frozen();
  auto c = tiny_config();
  c.lr_nonadv = 1e-3;
  c.lr_adv = 1e-3;
  Trainer t(c, f, tiny_data(*f));
  const auto pairs = t.pairs_for_step(0);

  auto disc0 = snapshot(t.nets().disc->parameters());
  auto attr0 = snapshot(t.nets().attr.parameters());
  auto map0 = snapshot(t.nets().mapper->parameters());
  t.nonadv_step(pairs);
  CHECK(same_values(disc0, snapshot(t.nets().disc->parameters())));
  CHECK_FALSE(same_values(attr0, snapshot(t.nets().attr.parameters())));
  CHECK_FALSE(same_values(map0, snapshot(t.nets().mapper->parameters())));

  attr0 = snapshot(t.nets().attr.parameters());
  map0 = snapshot(t.nets().mapper->parameters());
  t.adv_step(pairs, t.real_wplus_for_step(0));
  CHECK(same_values(attr0, snapshot(t.nets().attr.parameters())));  // encoder left alone by default
  CHECK_FALSE(same_values(map0, snapshot(t.nets().mapper->parameters())));
  CHECK_FALSE(same_values(disc0, snapshot(t.nets().disc->parameters())));
  for (const auto& p : t.nets().disc->parameters()) CHECK_FALSE((p.grad().defined() && p.grad().abs().sum().item<double>() > 0));

  c.adv_updates_encoder = true;
  Trainer t2(c, f, tiny_data(*f));
  auto a2 = snapshot(t2.nets().attr.parameters());
  t2.adv_step(pairs, t2.real_wplus_for_step(0));
  CHECK_FALSE(same_values(a2, snapshot(t2.nets().attr.parameters())));
}

TEST_CASE("frozen parts stay fixed and tampering is caught at save") {
  auto f = tiny_frozen();
  auto c = tiny_config();
  c.lr_nonadv = 1e-3;
  c.lr_adv = 1e-3;
  Trainer t(c, f, tiny_data(*f));
  const auto g0 = f->generator_fingerprint(), i0 = f->identity_fingerprint();
  for (int i = 0; i < 2; ++i) t.step();
  CHECK(f->generator_fingerprint() == g0);
  CHECK(f->identity_fingerprint() == i0);
  for (const auto& p : f->generator.parameters()) CHECK_FALSE(p.grad().defined());
  for (const auto& p : f->identity.parameters()) CHECK_FALSE(p.grad().defined());

  const auto dir = fresh_dir("xswap_tamper");
  std::filesystem::create_directories(dir);
  CHECK_NOTHROW(t.save_checkpoint(dir / "ok.xswm"));
  {
    torch::NoGradGuard ng;
    f->identity.parameters()[0].add_(1e-3);
  }
  CHECK_THROWS_AS(t.save_checkpoint(dir / "bad.xswm"), StateError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("resume reproduces an uninterrupted run bit for bit") {
  auto f = tiny_frozen();
  auto data = tiny_data(*f);
  auto c = tiny_config();
  c.lr_nonadv = 1e-3;
  c.lr_adv = 1e-3;
  c.steps = 8;
  c.checkpoint_every = 4;

  const auto full_dir = fresh_dir("xswap_full");
  std::vector<double> full_totals;
  auto full = train(c, f, data, full_dir, [&](const losses::LossReport& r) { full_totals.push_back(r.total); });
  CHECK(full.steps == 8);
  CHECK(std::filesystem::exists(checkpoint_path(full_dir, 4)));
  CHECK(std::filesystem::exists(checkpoint_path(full_dir, 8)));

  const auto part_dir = fresh_dir("xswap_part");
  auto c5 = c;
  c5.steps = 5;
  train(c5, f, data, part_dir);
  // Simulate an interruption after step 5: only the step-4 checkpoint survives.
  std::filesystem::remove(checkpoint_path(part_dir, 5));
  std::vector<double> resumed_totals;
  auto resumed = train(c, f, data, part_dir, [&](const losses::LossReport& r) { resumed_totals.push_back(r.total); });
  CHECK(resumed.steps == 8);
  REQUIRE(resumed_totals.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(resumed_totals[i] == full_totals[4 + i]);

  auto a = load_swap_nets(full.final_checkpoint), b = load_swap_nets(resumed.final_checkpoint);
  CHECK(same_values(snapshot(all_trainable(a)), snapshot(all_trainable(b))));

  // The log holds exactly one row per step.
  std::ifstream log(part_dir / "train_log.tsv");
  std::string line;
  int rows = -1;
  std::int64_t expect = 0;
  while (std::getline(log, line)) {
    if (rows++ < 0) continue;
    CHECK(std::stoll(line.substr(0, line.find('\t'))) == expect++);
  }
  CHECK(rows == 8);

  // Different seed gives a different run.
  auto cs = c;
  cs.seed = 22;
  cs.steps = 1;
  auto other = train(cs, f, data, fresh_dir("xswap_other"));
  auto o = load_swap_nets(other.final_checkpoint);
  CHECK_FALSE(same_values(snapshot(o.mapper->parameters()), snapshot(a.mapper->parameters())));

  for (const char* d : {"xswap_full", "xswap_part", "xswap_other"})
    std::filesystem::remove_all(std::filesystem::temp_directory_path() / d);
}

TEST_CASE("zero-step run writes the initialization") {
  auto f = tiny_frozen();
  auto c = tiny_config();
  c.steps = 0;
  const auto dir = fresh_dir("xswap_zero");
  auto r = train(c, f, tiny_data(*f), dir);
  CHECK(r.steps == 0);
  CHECK(r.final_checkpoint.filename() == "swap_step00000000.xswm");
  Trainer t(c, f, tiny_data(*f));
  auto n = load_swap_nets(r.final_checkpoint);
  CHECK(same_values(snapshot(all_trainable(n)), snapshot(all_trainable(t.nets()))));
  CHECK(latest_checkpoint(dir) == r.final_checkpoint);
  CHECK(latest_checkpoint(dir / "missing").empty());
  std::filesystem::remove_all(dir);
}
