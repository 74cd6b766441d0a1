#include "xswap/mapper.hpp"

#include "xswap/encoders.hpp"
#include "xswap/error.hpp"
#include "xswap/generator.hpp"
#include "xswap/rng.hpp"

namespace xswap {

using layers::EqualLinear;
using layers::lrelu;

torch::Tensor concat_codes(const torch::Tensor& id, const torch::Tensor& attr) {
  auto a = id.dim() == 1 ? id.unsqueeze(0) : id;
  auto b = attr.dim() == 1 ? attr.unsqueeze(0) : attr;
  if (a.dim() != 2 || a.size(1) != kIdDim || b.dim() != 2 || b.size(1) != kAttrDim || a.size(0) != b.size(0))
    throw ShapeError("concat_codes expects [N, 512] and [N, 1792]");
  return torch::cat({a, b}, 1);
}

LatentMapperImpl::LatentMapperImpl(const MapperConfig& cfg)
    : config(cfg), styles(num_styles(cfg.resolution)) {
  auto gen = torch_generator(cfg.seed);
  fc1 = register_module("fc1", EqualLinear(kCodeDim, 2048, gen));
  fc2 = register_module("fc2", EqualLinear(2048, 1024, gen));
  fc3 = register_module("fc3", EqualLinear(1024, 1024, gen));
  if (cfg.per_row_heads) {
    for (std::int64_t s = 0; s < styles; ++s)
      row_heads.push_back(register_module("head" + std::to_string(s), EqualLinear(1024, kLatentDim, gen)));
  } else {
    head = register_module("head", EqualLinear(1024, styles * kLatentDim, gen));
  }
}

torch::Tensor LatentMapperImpl::forward(const torch::Tensor& code) {
  if (code.dim() != 2 || code.size(1) != kCodeDim) throw ShapeError("mapper expects [N, 2304] codes");
  auto h = lrelu(fc3->forward(lrelu(fc2->forward(lrelu(fc1->forward(code))))));
  if (!row_heads.empty()) {
    std::vector<torch::Tensor> rows;
    for (auto& r : row_heads) rows.push_back(r->forward(h));
    return torch::stack(rows, 1);
  }
  return head->forward(h).view({code.size(0), styles, kLatentDim});
}

void LatentMapperImpl::set_output_bias(const torch::Tensor& w) {
  if (w.dim() != 1 || w.size(0) != kLatentDim) throw ShapeError("set_output_bias expects [512]");
  torch::NoGradGuard ng;
  if (!row_heads.empty()) {
    for (auto& r : row_heads) r->bias.copy_(w / r->lr_mul);
  } else {
    head->bias.copy_(w.repeat({styles}) / head->lr_mul);
  }
}

WplusDiscriminatorImpl::WplusDiscriminatorImpl(std::int64_t res, std::uint64_t seed)
    : resolution(res), styles(num_styles(res)) {
  auto gen = torch_generator(seed);
  fc1 = register_module("fc1", EqualLinear(styles * kLatentDim, 512, gen));
  fc2 = register_module("fc2", EqualLinear(512, 256, gen));
  out = register_module("out", EqualLinear(256, 1, gen));
}

torch::Tensor WplusDiscriminatorImpl::forward(const torch::Tensor& sp) {
  check_styles(sp, resolution);
  return out->forward(lrelu(fc2->forward(lrelu(fc1->forward(sp.flatten(1)))))).squeeze(1);
}

void export_mapper(const LatentMapper& m, ParamBundle& out, const std::string& prefix) {
  out.resolution = static_cast<std::uint32_t>(m->config.resolution);
  out.add(prefix + "meta.resolution", pack_u64(static_cast<std::uint64_t>(m->config.resolution)));
  out.add(prefix + "meta.per_row_heads", pack_u64(m->config.per_row_heads ? 1 : 0));
  out.add(prefix + "meta.seed", pack_u64(m->config.seed));
  export_module(*m, prefix, out);
}

LatentMapper import_mapper(const ParamBundle& in, const std::string& prefix) {
  MapperConfig c;
  c.resolution = static_cast<std::int64_t>(unpack_u64(in.get(prefix + "meta.resolution")));
  c.per_row_heads = unpack_u64(in.get(prefix + "meta.per_row_heads")) != 0;
  c.seed = unpack_u64(in.get(prefix + "meta.seed"));
  LatentMapper m(c);
  import_module(*m, prefix, in);
  return m;
}

void export_discriminator(const WplusDiscriminator& d, ParamBundle& out, const std::string& prefix) {
  out.add(prefix + "meta.resolution", pack_u64(static_cast<std::uint64_t>(d->resolution)));
  export_module(*d, prefix, out);
}

WplusDiscriminator import_discriminator(const ParamBundle& in, const std::string& prefix) {
  WplusDiscriminator d(static_cast<std::int64_t>(unpack_u64(in.get(prefix + "meta.resolution"))), 0);
  import_module(*d, prefix, in);
  return d;
}

}  // namespace xswap
