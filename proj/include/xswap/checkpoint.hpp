#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace xswap {

// Four-byte file tags of the binary parameter container.
inline constexpr std::string_view kGeneratorMagic = "XSWG";
inline constexpr std::string_view kEncoderMagic = "XSWE";
inline constexpr std::string_view kMapperMagic = "XSWM";

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  torch::Tensor value;  // stored as float32, any rank up to 255
};

// Ordered list of named parameter blocks plus the resolution the bundle
// belongs to. Layout on disk:
//   magic[4] | version u32 | resolution u32 |
//   repeated { name_len u16 | name | rank u8 | dims u32[rank] | f32[prod(dims)] }
// All integers and floats little-endian.
struct ParamBundle {
  std::uint32_t resolution = 0;
  std::vector<NamedTensor> blocks;

  void add(std::string name, const torch::Tensor& value);
  // Throws FormatError when the block is missing.
  const torch::Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
};

void write_container(const std::filesystem::path& path, std::string_view magic,
                     const ParamBundle& bundle);
ParamBundle read_container(const std::filesystem::path& path, std::string_view magic);

// Serialize into / parse from memory; the file variants wrap these.
std::string encode_container(std::string_view magic, const ParamBundle& bundle);
ParamBundle decode_container(std::string_view bytes, std::string_view magic);

// Copy every parameter and buffer of `module` into the bundle under `prefix`.
void export_module(const torch::nn::Module& module, const std::string& prefix, ParamBundle& out);
// Inverse of export_module; every parameter and buffer must be present with
// matching shape.
void import_module(torch::nn::Module& module, const std::string& prefix, const ParamBundle& in);

// 64-bit FNV-1a over the float32 bytes of all parameters, in registration order.
std::uint64_t fingerprint(const torch::nn::Module& module);

// Integers are stored as four exact 16-bit limbs so they survive the
// float32-only container.
torch::Tensor pack_u64(std::uint64_t value);
std::uint64_t unpack_u64(const torch::Tensor& limbs);

}  // namespace xswap
