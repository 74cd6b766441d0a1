#include "xswap/pipeline.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xswap/error.hpp"
#include "xswap/image.hpp"

namespace xswap {

Projection project_wplus(const Generator& gen, const torch::Tensor& targets_in, const ProjectConfig& cfg) {
  if (cfg.steps < 0) throw ConfigError("projection steps must be >= 0");
  auto targets = targets_in.dim() == 3 ? targets_in.unsqueeze(0) : targets_in;
  const auto res = gen.resolution();
  if (targets.dim() != 4 || targets.size(1) != 3 || targets.size(2) != res || targets.size(3) != res)
    throw ShapeError("projection targets must be [N, 3, " + std::to_string(res) + ", " + std::to_string(res) + "]");
  targets = targets.detach();
  const auto n = targets.size(0);
  auto start = broadcast(gen.w_avg().detach(), res).expand({n, -1, -1}).contiguous();
  auto sp = start.clone().requires_grad_(true);
  torch::optim::Adam opt({sp}, torch::optim::AdamOptions(cfg.lr));

  Projection out;
  out.styles = start.clone();
  out.best_objective = torch::full({n}, std::numeric_limits<double>::infinity(), torch::kFloat64);

  auto objective = [&](const torch::Tensor& s) {
    auto img = gen.synthesize(s);
    auto mse = (img - targets).pow(2).flatten(1).mean(1);
    return mse + cfg.reg * (s - start).pow(2).flatten(1).mean(1);
  };
  for (std::int64_t it = 0; it <= cfg.steps; ++it) {
    auto obj = objective(sp);  // objective of the current iterate
    auto obj64 = obj.detach().to(torch::kFloat64);
    if (!torch::isfinite(obj64).all().item<bool>())
      throw NumericError("projection objective is not finite at iterate " + std::to_string(it));
    {
      torch::NoGradGuard ng;
      auto better = obj64 < out.best_objective;
      out.best_objective = torch::where(better, obj64, out.best_objective);
      out.styles = torch::where(better.view({n, 1, 1}), sp.detach(), out.styles);
    }
    out.trace.push_back(out.best_objective[0].item<double>());
    if (it == cfg.steps) break;
    opt.zero_grad();
    obj.sum().backward();
    opt.step();
  }
  return out;
}

torch::Tensor SwapDataset::image_batch(const std::vector<std::int64_t>& idx) const {
  auto sel = images.index_select(0, torch::tensor(idx, torch::kInt64));
  return sel.to(torch::kFloat32) / 127.5 - 1.0;
}

torch::Tensor SwapDataset::latent_batch(const std::vector<std::int64_t>& idx) const {
  return latents.index_select(0, torch::tensor(idx, torch::kInt64));
}

SwapDataset SwapDataset::subset(const std::vector<std::int64_t>& idx) const {
  SwapDataset out;
  out.resolution = resolution;
  out.seed = seed;
  out.mode = mode;
  auto t = torch::tensor(idx, torch::kInt64);
  out.latents = latents.index_select(0, t);
  out.images = images.index_select(0, t);
  for (auto i : idx) out.record_ids.push_back(record_ids.at(static_cast<std::size_t>(i)));
  return out;
}

torch::Tensor record_latent_z(std::uint64_t seed, std::int64_t index) {
  return sample_z(derive_seed(seed, static_cast<std::uint64_t>(index)), 1);
}

namespace {

torch::Tensor quantize(const torch::Tensor& images) {
  return ((images.detach() + 1.0) * 127.5).round().clamp(0, 255).to(torch::kUInt8);
}

}  // namespace

SwapDataset build_dataset(const Generator& gen, std::int64_t n, std::uint64_t seed, const DatasetConfig& cfg,
                          const std::function<void(std::int64_t)>& progress) {
  if (n < 1) throw ArgumentError("build_dataset needs n >= 1");
  if (cfg.batch < 1) throw ConfigError("dataset batch must be >= 1");
  const auto res = gen.resolution();
  SwapDataset ds;
  ds.resolution = res;
  ds.seed = seed;
  ds.mode = cfg.mode;
  std::vector<torch::Tensor> lat, img;
  torch::NoGradGuard ng;
  for (std::int64_t lo = 0; lo < n; lo += cfg.batch) {
    const auto hi = std::min(n, lo + cfg.batch);
    // Mapped one record at a time so a stored code never depends on batch size.
    std::vector<torch::Tensor> ws;
    for (auto i = lo; i < hi; ++i) ws.push_back(gen.map(record_latent_z(seed, i)));
    auto sp = broadcast(torch::cat(ws), res);
    auto x = gen.synthesize(sp);
    if (cfg.mode == DatasetMode::kInversion) {
      torch::AutoGradMode on(true);
      for (auto plo = std::int64_t{0}; plo < hi - lo; plo += cfg.projection.batch) {
        const auto phi = std::min(hi - lo, plo + cfg.projection.batch);
        try {
          auto p = project_wplus(gen, x.slice(0, plo, phi), cfg.projection);
          sp.slice(0, plo, phi).copy_(p.styles);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (records " + std::to_string(lo + plo) + ".." +
                             std::to_string(lo + phi - 1) + ")");
        }
      }
    }
    lat.push_back(sp.to(torch::kFloat32).contiguous());
    img.push_back(quantize(x));
    for (auto i = lo; i < hi; ++i) ds.record_ids.push_back(i);
    if (progress) progress(hi);
  }
  ds.latents = torch::cat(lat);
  ds.images = torch::cat(img);
  return ds;
}

std::pair<std::int64_t, std::int64_t> split_sizes(std::int64_t n, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  const auto train = static_cast<std::int64_t>(std::llround(static_cast<double>(n) * train_fraction));
  return {train, n - train};
}

std::pair<SwapDataset, SwapDataset> split(const SwapDataset& ds, double train_fraction, std::uint64_t seed) {
  if (ds.size() == 0) throw ArgumentError("cannot split an empty dataset");
  const auto [n_train, n_test] = split_sizes(ds.size(), train_fraction);
  auto gen = torch_generator(seed);
  auto perm = torch::randperm(ds.size(), gen, torch::kInt64);
  std::vector<std::int64_t> order(perm.data_ptr<std::int64_t>(), perm.data_ptr<std::int64_t>() + perm.numel());
  std::vector<std::int64_t> a(order.begin(), order.begin() + n_train), b(order.begin() + n_train, order.end());
  return {ds.subset(a), ds.subset(b)};
}

PairSample sample_pair(const SwapDataset& ds, double p_same, Rng& rng) {
  if (ds.size() == 0) throw ArgumentError("cannot sample pairs from an empty dataset");
  if (!(p_same >= 0.0 && p_same <= 1.0)) throw ConfigError("p_same must lie in [0, 1]");
  const auto n = static_cast<std::uint64_t>(ds.size());
  PairSample p;
  if (rng.bernoulli(p_same)) {
    p.source = p.target = static_cast<std::int64_t>(rng.below(n));
    p.same = true;
  } else {
    p.source = static_cast<std::int64_t>(rng.below(n));
    p.target = static_cast<std::int64_t>(rng.below(n));
  }
  return p;
}

std::vector<PairSample> sample_pairs(const SwapDataset& ds, double p_same, Rng& rng, std::int64_t count) {
  std::vector<PairSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(sample_pair(ds, p_same, rng));
  return out;
}

namespace {

template <typename T>
void put(std::string& s, T v) {
  static_assert(std::endian::native == std::endian::little);
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  s.append(b, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t& pos, const char* field) {
  if (pos + sizeof(T) > bytes.size()) throw FormatError(std::string("latent file truncated in field '") + field + "'");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

const char* mode_name(DatasetMode m) { return m == DatasetMode::kFast ? "fast" : "inversion"; }

}  // namespace

std::string encode_latents(const torch::Tensor& latents) {
  if (latents.dim() != 3 || latents.size(2) != kLatentDim) throw ShapeError("latents must be [n, S, 512]");
  auto t = latents.to(torch::kFloat32).contiguous();
  std::string s(kDatasetMagic);
  put<std::uint32_t>(s, kDatasetVersion);
  put<std::uint64_t>(s, static_cast<std::uint64_t>(t.size(0)));
  put<std::uint32_t>(s, static_cast<std::uint32_t>(t.size(1)));
  put<std::uint32_t>(s, static_cast<std::uint32_t>(t.size(2)));
  s.append(reinterpret_cast<const char*>(t.data_ptr<float>()), static_cast<std::size_t>(t.numel()) * sizeof(float));
  return s;
}

torch::Tensor decode_latents(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != kDatasetMagic) throw FormatError("latent file: bad field 'magic'");
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(bytes, pos, "version");
  if (version != kDatasetVersion)
    throw FormatError("latent file: unsupported version " + std::to_string(version) + " in field 'version'");
  const auto count = get<std::uint64_t>(bytes, pos, "count");
  const auto styles = get<std::uint32_t>(bytes, pos, "S");
  const auto dim = get<std::uint32_t>(bytes, pos, "dim");
  if (dim != kLatentDim) throw FormatError("latent file: bad field 'dim' (" + std::to_string(dim) + ")");
  if (styles == 0 || styles > 64) throw FormatError("latent file: bad field 'S' (" + std::to_string(styles) + ")");
  const auto values = count * styles * dim;
  if (count > (1ull << 32) || bytes.size() - pos != values * sizeof(float))
    throw FormatError("latent file truncated or oversized in field 'values' (count " + std::to_string(count) + ")");
  auto t = torch::empty({static_cast<std::int64_t>(count), styles, dim}, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), bytes.data() + pos, values * sizeof(float));
  return t;
}

void save_dataset(const SwapDataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  {
    std::ofstream f(dir / "latents.xswd", std::ios::binary);
    const auto bytes = encode_latents(ds.latents);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + (dir / "latents.xswd").string());
  }
  std::ofstream m(dir / "manifest.tsv");
  m << "#index\trecord_id\timage\n";
  m << "# resolution " << ds.resolution << "\n# seed " << ds.seed << "\n# mode " << mode_name(ds.mode) << '\n';
  char name[32];
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof name, "images/%06lld.png", static_cast<long long>(i));
    write_png(dir / name, ds.images[i].to(torch::kFloat32) / 127.5 - 1.0);
    m << i << '\t' << ds.record_ids[static_cast<std::size_t>(i)] << '\t' << name << '\n';
  }
  if (!m) throw IoError("write failed: " + (dir / "manifest.tsv").string());
}

SwapDataset load_dataset(const std::filesystem::path& dir) {
  SwapDataset ds;
  std::ifstream m(dir / "manifest.tsv");
  if (!m) throw IoError("cannot read " + (dir / "manifest.tsv").string());
  std::vector<torch::Tensor> imgs;
  std::string line;
  int lineno = 0;
  while (std::getline(m, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream h(line.substr(1));
      std::string key, value;
      h >> key >> value;
      if (key == "resolution") ds.resolution = std::stoll(value);
      else if (key == "seed") ds.seed = std::stoull(value);
      else if (key == "mode") ds.mode = value == "inversion" ? DatasetMode::kInversion : DatasetMode::kFast;
      continue;
    }
    std::istringstream row(line);
    long long idx, rec;
    std::string file;
    if (!(row >> idx >> rec >> file)) throw FormatError("manifest.tsv line " + std::to_string(lineno) + ": bad record");
    ds.record_ids.push_back(rec);
    imgs.push_back(quantize(read_png(dir / file)));
  }
  std::ifstream f(dir / "latents.xswd", std::ios::binary);
  if (!f) throw IoError("cannot read " + (dir / "latents.xswd").string());
  std::ostringstream ss;
  ss << f.rdbuf();
  ds.latents = decode_latents(ss.str());
  if (ds.latents.size(0) != ds.size())
    throw FormatError("latent count " + std::to_string(ds.latents.size(0)) + " does not match manifest count " +
                      std::to_string(ds.size()));
  if (ds.resolution > 0 && ds.latents.size(1) != num_styles(ds.resolution))
    throw FormatError("latent style count does not match resolution " + std::to_string(ds.resolution));
  ds.images = imgs.empty() ? torch::empty({0, 3, ds.resolution, ds.resolution}, torch::kUInt8) : torch::stack(imgs);
  return ds;
}

}  // namespace xswap
