#include "xswap/generator.hpp"

#include <bit>
#include <cmath>

#include "xswap/error.hpp"
#include "xswap/layers.hpp"
#include "xswap/rng.hpp"

namespace xswap {

using layers::EqualLinear;

std::int64_t num_styles(std::int64_t resolution) {
  if (resolution < 4 || !std::has_single_bit(static_cast<std::uint64_t>(resolution)))
    throw ConfigError("resolution must be a power of two >= 4, got " + std::to_string(resolution));
  return static_cast<std::int64_t>(std::bit_width(static_cast<std::uint64_t>(resolution)) - 1) * 2 - 2;
}

torch::Tensor sample_z(at::Generator& gen, std::int64_t batch) {
  if (batch < 1) throw ArgumentError("sample_z needs batch >= 1");
  return torch::randn({batch, kLatentDim}, gen);
}

torch::Tensor sample_z(std::uint64_t seed, std::int64_t batch) {
  auto gen = torch_generator(seed);
  return sample_z(gen, batch);
}

torch::Tensor broadcast(const torch::Tensor& w, std::int64_t resolution) {
  const auto s = num_styles(resolution);
  auto batched = w.dim() == 1 ? w.unsqueeze(0) : w;
  if (batched.dim() != 2 || batched.size(1) != kLatentDim)
    throw ShapeError("broadcast expects w of shape [512] or [N, 512]");
  return batched.unsqueeze(1).expand({batched.size(0), s, kLatentDim}).contiguous();
}

void check_styles(const torch::Tensor& styles, std::int64_t resolution) {
  const auto s = num_styles(resolution);
  if (styles.dim() != 3 || styles.size(1) != s || styles.size(2) != kLatentDim)
    throw ShapeError("expected styles of shape [N, " + std::to_string(s) + ", 512] for resolution " +
                     std::to_string(resolution));
}

std::int64_t GeneratorConfig::channels_at(std::int64_t r) const {
  return std::max<std::int64_t>(1, std::min(channel_max, channel_base / r));
}

namespace {

// Style-driven convolution: modulated/demodulated weights or AdaIN.
struct StyleConvImpl : torch::nn::Module {
  StyleConvImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, at::Generator& gen,
                bool demodulate_, bool adain_, std::int64_t noise_res, bool activate_)
      : in_ch(in), out_ch(out), padding(kernel / 2), demodulate(demodulate_), adain(adain_),
        activate(activate_),
        weight_gain(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))) {
    affine = register_module("affine", EqualLinear(kLatentDim, adain ? 2 * out : in, gen, 1.0));
    if (adain) {
      torch::NoGradGuard g;
      affine->bias.slice(0, out).zero_();
    }
    weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}, gen));
    bias = register_parameter("bias", torch::zeros({out}));
    if (noise_res > 0) {
      noise_strength = register_parameter("noise_strength", torch::zeros({1}));
      noise_const = register_buffer("noise_const", torch::randn({1, 1, noise_res, noise_res}, gen));
    }
  }

  torch::Tensor forward(torch::Tensor x, const torch::Tensor& w) {
    const auto n = x.size(0), h = x.size(2), wd = x.size(3);
    if (adain) {
      x = torch::conv2d(x, weight * weight_gain, {}, 1, padding);
      x = torch::instance_norm(x, {}, {}, {}, {}, true, 0.0, 1e-5, false);
      auto st = affine->forward(w);
      x = x * st.slice(1, 0, out_ch).view({n, out_ch, 1, 1}) +
          st.slice(1, out_ch).view({n, out_ch, 1, 1});
    } else {
      auto s = affine->forward(w);
      auto wt = weight.unsqueeze(0) * weight_gain * s.view({n, 1, in_ch, 1, 1});
      if (demodulate) wt = wt * torch::rsqrt(wt.pow(2).sum({2, 3, 4}, true) + 1e-8);
      const std::vector<std::int64_t> stride{1, 1}, pad{padding, padding};
      x = torch::conv2d(x.reshape({1, n * in_ch, h, wd}),
                        wt.reshape({n * out_ch, in_ch, wt.size(3), wt.size(4)}), {}, stride, pad,
                        stride, n);
      x = x.reshape({n, out_ch, h, wd});
    }
    if (noise_const.defined()) x = x + noise_const * noise_strength;
    x = x + bias.view({1, -1, 1, 1});
    if (activate) x = torch::leaky_relu(x, 0.2) * std::sqrt(2.0);
    return x;
  }

  std::int64_t in_ch, out_ch, padding;
  bool demodulate, adain, activate;
  double weight_gain;
  EqualLinear affine{nullptr};
  torch::Tensor weight, bias, noise_strength, noise_const;
};
TORCH_MODULE(StyleConv);

}  // namespace

struct GeneratorNet : torch::nn::Module {
  explicit GeneratorNet(const GeneratorConfig& cfg) : config(cfg) {
    const auto s = xswap::num_styles(cfg.resolution);
    if (cfg.mapping_layers < 1) throw ConfigError("mapping network needs at least one layer");
    auto gen = torch_generator(cfg.seed);
    for (int i = 0; i < cfg.mapping_layers; ++i)
      mapping.push_back(register_module("mapping" + std::to_string(i),
                                        EqualLinear(kLatentDim, kLatentDim, gen, 0.0, 0.01)));
    const auto c4 = cfg.channels_at(4);
    const_input = register_parameter("const", torch::randn({1, c4, 4, 4}, gen));
    std::int64_t in = c4;
    int idx = 0;
    for (std::int64_t r = 4; r <= cfg.resolution; r *= 2) {
      const auto out = cfg.channels_at(r);
      for (int k = 0; k < 2; ++k) {
        convs.push_back(register_module("conv" + std::to_string(idx++),
                                        StyleConv(k == 0 ? in : out, out, 3, gen, true, cfg.adain, r, true)));
      }
      torgb.push_back(register_module("torgb" + std::to_string(torgb.size()),
                                      StyleConv(out, 3, 1, gen, false, false, 0, false)));
      in = out;
    }
    if (static_cast<std::int64_t>(convs.size()) != s) throw ConfigError("style count mismatch");
    w_avg = register_buffer("w_avg", torch::zeros({kLatentDim}));
  }

  torch::Tensor map(const torch::Tensor& z) {
    auto x = z * torch::rsqrt(z.pow(2).mean(1, true) + 1e-8);
    for (auto& layer : mapping) x = torch::leaky_relu(layer->forward(x), 0.2) * std::sqrt(2.0);
    return x;
  }

  torch::Tensor synthesize(const torch::Tensor& styles) {
    const auto n = styles.size(0);
    auto x = const_input.expand({n, -1, -1, -1});
    torch::Tensor rgb;
    for (std::size_t b = 0; b < torgb.size(); ++b) {
      if (b > 0) {
        auto up = [](const torch::Tensor& t) {
          return torch::upsample_bilinear2d(t, {t.size(2) * 2, t.size(3) * 2}, false);
        };
        x = up(x);
        rgb = up(rgb);
      }
      x = convs[2 * b]->forward(x, styles.select(1, 2 * b));
      x = convs[2 * b + 1]->forward(x, styles.select(1, 2 * b + 1));
      auto y = torgb[b]->forward(x, styles.select(1, 2 * b + 1));
      rgb = rgb.defined() ? rgb + y : y;
    }
    return torch::tanh(rgb);
  }

  GeneratorConfig config;
  std::vector<EqualLinear> mapping;
  std::vector<StyleConv> convs, torgb;
  torch::Tensor const_input, w_avg;
};

Generator::Generator(const GeneratorConfig& config) : net_(std::make_shared<GeneratorNet>(config)) {
  update_w_avg(4096, derive_seed(config.seed, 0xA1));
}

const GeneratorNet& Generator::net() const {
  if (!net_) throw StateError("generator is not initialized (no checkpoint loaded)");
  return *net_;
}

const GeneratorConfig& Generator::config() const { return net().config; }

torch::Tensor Generator::map(const torch::Tensor& z) const {
  net();
  if (z.dim() != 2 || z.size(1) != kLatentDim) throw ShapeError("map expects z of shape [N, 512]");
  return net_->map(z);
}

torch::Tensor Generator::synthesize(const torch::Tensor& styles) const {
  check_styles(styles, net().config.resolution);
  return net_->synthesize(styles);
}

torch::Tensor Generator::generate(const torch::Tensor& z) const {
  return synthesize(broadcast(map(z), resolution()));
}

torch::Tensor Generator::w_avg() const { return net().w_avg; }

void Generator::update_w_avg(std::int64_t samples, std::uint64_t seed) {
  net();
  torch::NoGradGuard no_grad;
  auto z = sample_z(seed, samples).to(net_->w_avg.dtype());
  net_->w_avg.copy_(net_->map(z).mean(0));
}

void Generator::freeze() {
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

bool Generator::frozen() const {
  for (const auto& p : net().parameters())
    if (p.requires_grad()) return false;
  return true;
}

void Generator::to(torch::Dtype dtype) { net_->to(dtype); }

Generator Generator::clone() const {
  Generator copy;
  copy.net_ = std::make_shared<GeneratorNet>(net().config);
  copy.net_->to(net_->w_avg.scalar_type());
  {
    torch::NoGradGuard no_grad;
    auto dst = copy.net_->parameters();
    auto src = net_->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
    auto dst_b = copy.net_->buffers();
    auto src_b = net_->buffers();
    for (std::size_t i = 0; i < src_b.size(); ++i) dst_b[i].copy_(src_b[i]);
  }
  if (frozen()) copy.freeze();
  return copy;
}

std::uint64_t Generator::fingerprint() const { return xswap::fingerprint(net()); }

std::vector<torch::Tensor> Generator::parameters() const { return net().parameters(); }

torch::nn::Module& Generator::module() {
  net();
  return *net_;
}

const torch::nn::Module& Generator::module() const { return net(); }

void Generator::export_params(ParamBundle& bundle) const {
  const auto& cfg = net().config;
  bundle.resolution = static_cast<std::uint32_t>(cfg.resolution);
  bundle.add("meta.mapping_layers", pack_u64(static_cast<std::uint64_t>(cfg.mapping_layers)));
  bundle.add("meta.channel_base", pack_u64(static_cast<std::uint64_t>(cfg.channel_base)));
  bundle.add("meta.channel_max", pack_u64(static_cast<std::uint64_t>(cfg.channel_max)));
  bundle.add("meta.adain", pack_u64(cfg.adain ? 1 : 0));
  bundle.add("meta.seed", pack_u64(cfg.seed));
  export_module(*net_, "g.", bundle);
}

Generator Generator::from_bundle(const ParamBundle& bundle) {
  GeneratorConfig cfg;
  cfg.resolution = bundle.resolution;
  cfg.mapping_layers = static_cast<int>(unpack_u64(bundle.get("meta.mapping_layers")));
  cfg.channel_base = static_cast<std::int64_t>(unpack_u64(bundle.get("meta.channel_base")));
  cfg.channel_max = static_cast<std::int64_t>(unpack_u64(bundle.get("meta.channel_max")));
  cfg.adain = unpack_u64(bundle.get("meta.adain")) != 0;
  cfg.seed = unpack_u64(bundle.get("meta.seed"));
  Generator g;
  g.net_ = std::make_shared<GeneratorNet>(cfg);
  import_module(*g.net_, "g.", bundle);
  return g;
}

void Generator::save(const std::filesystem::path& path) const {
  ParamBundle bundle;
  export_params(bundle);
  write_container(path, kGeneratorMagic, bundle);
}

Generator Generator::load(const std::filesystem::path& path) {
  return from_bundle(read_container(path, kGeneratorMagic));
}

}  // namespace xswap
