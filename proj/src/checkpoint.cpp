#include "xswap/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xswap/error.hpp"

namespace xswap {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

void ParamBundle::add(std::string name, const torch::Tensor& value) {
  blocks.push_back({std::move(name), value.detach().to(torch::kFloat32).contiguous().clone()});
}

const torch::Tensor& ParamBundle::get(std::string_view name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b.value;
  throw FormatError("missing parameter block '" + std::string(name) + "'");
}

bool ParamBundle::contains(std::string_view name) const {
  for (const auto& b : blocks)
    if (b.name == name) return true;
  return false;
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T take(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take_bytes(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("truncated container while reading ") + field);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(std::string_view magic, const ParamBundle& bundle) {
  if (magic.size() != 4) throw ArgumentError("container magic must be 4 bytes");
  std::string out(magic);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, bundle.resolution);
  for (const auto& block : bundle.blocks) {
    if (block.name.size() > 0xFFFF) throw ArgumentError("block name too long: " + block.name);
    const auto t = block.value.to(torch::kFloat32).contiguous();
    if (t.dim() > 255) throw ArgumentError("block rank too large: " + block.name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(block.name.size()));
    out += block.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dim()));
    for (auto d : t.sizes()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data_ptr<float>()),
               static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  return out;
}

ParamBundle decode_container(std::string_view bytes, std::string_view magic) {
  Reader r(bytes);
  auto got = r.take_bytes(4, "magic");
  if (got != magic)
    throw FormatError("bad magic: expected '" + std::string(magic) + "', found '" +
                      std::string(got) + "'");
  const auto version = r.take<std::uint32_t>("version");
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  ParamBundle bundle;
  bundle.resolution = r.take<std::uint32_t>("resolution");
  while (!r.done()) {
    const auto name_len = r.take<std::uint16_t>("block name length");
    std::string name(r.take_bytes(name_len, "block name"));
    const auto rank = r.take<std::uint8_t>("block rank");
    std::vector<std::int64_t> dims(rank);
    std::int64_t count = 1;
    for (auto& d : dims) {
      d = r.take<std::uint32_t>("block dims");
      count *= d;
    }
    auto raw = r.take_bytes(static_cast<std::size_t>(count) * sizeof(float), "block values");
    auto t = torch::empty(dims, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), raw.data(), raw.size());
    bundle.blocks.push_back({std::move(name), t});
  }
  return bundle;
}

void write_container(const std::filesystem::path& path, std::string_view magic,
                     const ParamBundle& bundle) {
  const auto bytes = encode_container(magic, bundle);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

ParamBundle read_container(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_container(ss.str(), magic);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void export_module(const torch::nn::Module& module, const std::string& prefix, ParamBundle& out) {
  for (const auto& p : module.named_parameters()) out.add(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers()) out.add(prefix + b.key(), b.value());
}

void import_module(torch::nn::Module& module, const std::string& prefix, const ParamBundle& in) {
  torch::NoGradGuard no_grad;
  auto load = [&](const std::string& key, torch::Tensor& dst) {
    const auto& src = in.get(prefix + key);
    if (src.sizes() != dst.sizes())
      throw ShapeError("shape mismatch for '" + prefix + key + "'");
    dst.copy_(src);
  };
  for (auto& p : module.named_parameters()) load(p.key(), p.value());
  for (auto& b : module.named_buffers()) load(b.key(), b.value());
}

std::uint64_t fingerprint(const torch::nn::Module& module) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : module.parameters()) {
    const auto t = p.detach().to(torch::kFloat32).contiguous();
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data_ptr<float>());
    const auto n = static_cast<std::size_t>(t.numel()) * sizeof(float);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

torch::Tensor pack_u64(std::uint64_t value) {
  auto t = torch::empty({4}, torch::kFloat32);
  for (int i = 0; i < 4; ++i) t[i] = static_cast<float>((value >> (16 * i)) & 0xFFFF);
  return t;
}

std::uint64_t unpack_u64(const torch::Tensor& limbs) {
  if (limbs.numel() != 4) throw FormatError("integer block must have 4 limbs");
  auto t = limbs.to(torch::kFloat32).contiguous();
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const float limb = t.data_ptr<float>()[i];
    if (!(limb >= 0.0f && limb <= 65535.0f) || limb != static_cast<float>(static_cast<int>(limb)))
      throw FormatError("corrupt integer limb");
    v |= static_cast<std::uint64_t>(limb) << (16 * i);
  }
  return v;
}

}  // namespace xswap
