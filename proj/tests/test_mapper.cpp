#include "testing.hpp"

#include "gradcheck.hpp"
#include "xswap/encoders.hpp"
#include "xswap/error.hpp"
#include "xswap/generator.hpp"
#include "xswap/mapper.hpp"
#include "xswap/rng.hpp"

using namespace xswap;

TEST_CASE("concat_codes placement and round trip") {
  auto id = torch::zeros({512});
  id[0] = 1.0;
  auto code = concat_codes(id, torch::zeros({1792}));
  CHECK(code.sizes() == torch::IntArrayRef({1, 2304}));
  CHECK(code[0][0].item<float>() == 1.0f);
  CHECK(code.abs().sum().item<float>() == 1.0f);

  auto gen = torch_generator(1);
  auto a = torch::randn({3, 512}, gen), b = torch::randn({3, 1792}, gen);
  auto c = concat_codes(a, b);
  CHECK(c.size(1) == kCodeDim);
  CHECK(torch::equal(c.slice(1, 0, 512), a));
  CHECK(torch::equal(c.slice(1, 512), b));
  CHECK_THROWS_AS(concat_codes(torch::zeros({511}), torch::zeros({1792})), ShapeError);
  CHECK_THROWS_AS(concat_codes(torch::zeros({2, 512}), torch::zeros({3, 1792})), ShapeError);
}

TEST_CASE("mapper output shape follows the style count") {
  for (std::int64_t r : {16, 64, 1024}) {
    LatentMapper m(MapperConfig{r, false, 1});
    auto out = m->forward(torch::zeros({2, kCodeDim}));
    CHECK(out.sizes() == torch::IntArrayRef({2, num_styles(r), 512}));
  }
  LatentMapper rows(MapperConfig{64, true, 1});
  CHECK(rows->forward(torch::zeros({1, kCodeDim})).sizes() == torch::IntArrayRef({1, 10, 512}));
}

TEST_CASE("mapper: zero propagation, determinism, batch independence") {
  LatentMapper m(MapperConfig{64, false, 2});
  layers::zero_(*m);
  CHECK(m->forward(torch::zeros({1, kCodeDim})).abs().max().item<float>() == 0.0f);

  LatentMapper live(MapperConfig{64, false, 3});
  auto gen = torch_generator(4);
  auto code = torch::randn({4, kCodeDim}, gen);
  auto y = live->forward(code);
  CHECK(torch::equal(y, live->forward(code)));
  auto bumped = code.clone();
  bumped[2] += 1.0;
  auto y2 = live->forward(bumped);
  for (int j : {0, 1, 3}) CHECK(torch::equal(y2[j], y[j]));
  CHECK_FALSE(torch::equal(y2[2], y[2]));

  auto w = torch::randn({512}, gen);
  live->set_output_bias(w);
  layers::zero_(*live->head);
  live->set_output_bias(w);
  auto flat = live->forward(code);
  for (int s = 0; s < 10; ++s) CHECK(torch::allclose(flat[0][s], w));
}

TEST_CASE("mapper gradient matches finite differences (64-bit)") {
  LatentMapper m(MapperConfig{16, false, 5});
  m->to(torch::kFloat64);
  auto gen = torch_generator(6);
  auto probe = torch::randn({1, num_styles(16), 512}, gen, torch::kFloat64);
  auto code = torch::randn({1, kCodeDim}, gen, torch::kFloat64);
  auto r = testing::grad_check([&](const torch::Tensor& c) { return (m->forward(c) * probe).sum(); }, code, 64);
  CHECK(r.fd_norm > 0.0);
  CHECK(r.relative_error < 1e-3);
}

TEST_CASE("W+ discriminator") {
  WplusDiscriminator d(64, 7);
  auto gen = torch_generator(8);
  auto sp = torch::randn({3, 10, 512}, gen);
  auto l = d->forward(sp);
  CHECK(l.sizes() == torch::IntArrayRef({3}));
  CHECK(torch::equal(l, d->forward(sp)));
  CHECK_THROWS_AS(d->forward(torch::zeros({1, 12, 512})), ShapeError);
  CHECK(torch::equal(sp.flatten(1).view({3, 10, 512}), sp));

  layers::zero_(*d->out);
  CHECK(d->forward(sp).abs().max().item<float>() == 0.0f);

  WplusDiscriminator d64(16, 9);
  d64->to(torch::kFloat64);
  auto x = torch::randn({2, num_styles(16), 512}, gen, torch::kFloat64);
  auto r = testing::grad_check([&](const torch::Tensor& v) { return d64->forward(v).sum(); }, x, 64);
  CHECK(r.fd_norm > 0.0);
  CHECK(r.relative_error < 1e-3);
}

TEST_CASE("mapper and discriminator parameter bundles") {
  LatentMapper m(MapperConfig{32, true, 11});
  WplusDiscriminator d(32, 12);
  ParamBundle b;
  export_mapper(m, b);
  export_discriminator(d, b);
  auto bytes = encode_container(kMapperMagic, b);
  auto back = decode_container(bytes, kMapperMagic);
  auto m2 = import_mapper(back);
  auto d2 = import_discriminator(back);
  CHECK(fingerprint(*m2) == fingerprint(*m));
  CHECK(fingerprint(*d2) == fingerprint(*d));
  CHECK(m2->config.per_row_heads);
  CHECK(encode_container(kMapperMagic, back) == bytes);
}
