#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "xswap/image.hpp"
#include "xswap/rng.hpp"

// Procedural face renderer with explicit identity and attribute factors.
//
// Geometry is defined on a 64-pixel reference canvas and scaled by
// resolution / 64. Translation is in reference pixels, so at 64px it is in
// image pixels. Landmark offsets are snapped to multiples of 1/1024 pixel,
// which keeps translated landmarks exact in floating point.
namespace xswap::procfaces {

inline constexpr int kNumLandmarks = 68;
inline constexpr int kMaxTranslation = 4;

struct IdentityParams {
  std::int64_t identity_id = 0;
  double face_aspect = 1.0;                // height / width, [0.7, 1.3]
  std::array<double, 3> skin_tone{};       // RGB in [0, 1]
  double eye_spacing = 0.35;               // fraction of face width, [0.25, 0.45]
  double nose_scale = 0.1;                 // fraction of face width, [0.05, 0.2]

  bool operator==(const IdentityParams&) const = default;
};

struct AttributeParams {
  double yaw = 0.0;                        // degrees, [-45, 45]
  std::array<double, 2> translation{};     // integer reference pixels, |d| <= kMaxTranslation
  double mouth_curve = 0.0;                // [-1, 1], frown to smile
  double brightness = 1.0;                 // multiplicative gain, [0.6, 1.4]
  double background_hue = 0.0;             // degrees, [0, 360)

  bool operator==(const AttributeParams&) const = default;
};

// Flat factor vector. Field order:
//   0 face_aspect, 1-3 skin_tone r/g/b, 4 eye_spacing, 5 nose_scale,
//   6 yaw, 7 dx, 8 dy, 9 mouth_curve, 10 brightness, 11 background_hue
inline constexpr int kFactorCount = 12;
using FactorVector = std::array<double, kFactorCount>;

enum FactorIndex : int {
  kFaceAspect = 0,
  kSkinR,
  kSkinG,
  kSkinB,
  kEyeSpacing,
  kNoseScale,
  kYaw,
  kDx,
  kDy,
  kMouthCurve,
  kBrightness,
  kBackgroundHue,
};

const std::array<const char*, kFactorCount>& factor_names();

FactorVector to_factors(const IdentityParams& id, const AttributeParams& attr);
// The identity label is not part of the factor vector and is passed back in.
std::pair<IdentityParams, AttributeParams> from_factors(const FactorVector& f,
                                                        std::int64_t identity_id);

bool in_range(const IdentityParams& id);
bool in_range(const AttributeParams& attr);

// Identity factors are a pure function of (master_seed, identity_id).
IdentityParams sample_identity(std::uint64_t master_seed, std::int64_t identity_id);

// Consumes exactly kAttributeDraws values from the stream.
inline constexpr int kAttributeDraws = 6;
AttributeParams sample_attributes(Rng& rng);

bool supported_resolution(std::int64_t resolution);

// [3, R, R] float32 image in [-1, 1]. Throws ConfigError for unsupported R.
Image render(const IdentityParams& id, const AttributeParams& attr, std::int64_t resolution);

// [68, 2] float64 tensor of (x, y) pixel coordinates.
torch::Tensor landmarks_oracle(const IdentityParams& id, const AttributeParams& attr,
                               std::int64_t resolution);

struct CorpusEntry {
  Image image;
  IdentityParams identity;
  AttributeParams attributes;

  FactorVector factors() const { return to_factors(identity, attributes); }
};

struct Corpus {
  std::int64_t resolution = 0;
  std::vector<CorpusEntry> entries;

  std::int64_t num_identities() const;
  // [N, 3, R, R] stack of all images.
  torch::Tensor images() const;
  // [N] int64 identity labels.
  torch::Tensor labels() const;
};

// Entries are identity-major; attributes for identity i come from a stream
// derived from (seed, i), so identities can be generated independently.
Corpus make_corpus(std::int64_t n_identities, std::int64_t images_per_identity,
                   std::int64_t resolution, std::uint64_t seed);

// Directory with manifest.tsv and one PNG per entry.
void export_corpus(const Corpus& corpus, const std::filesystem::path& dir);
// Images come back 8-bit quantized; factors are exact.
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace xswap::procfaces
