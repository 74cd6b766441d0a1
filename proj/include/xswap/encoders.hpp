#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "xswap/checkpoint.hpp"
#include "xswap/procfaces.hpp"

// Feature extractors: an overlapping-patch transformer for identity, a
// convolutional attribute encoder, and pluggable landmark providers.
namespace xswap {

inline constexpr std::int64_t kIdDim = 512;
inline constexpr std::int64_t kAttrDim = 1792;

// ((H - P) / S + 1)^2 for square inputs. Throws ShapeError unless S <= P,
// P <= H and S divides H - P.
std::int64_t token_count(std::int64_t side, std::int64_t patch, std::int64_t stride);

// Raw sliding-window patches of [N, 3, H, W] images: [N, T, 3 * P * P],
// row-major over window positions, each patch flattened channel-major.
torch::Tensor extract_patches(const torch::Tensor& images, std::int64_t patch, std::int64_t stride);

struct IdentityEncoderConfig {
  std::int64_t resolution = 64;
  std::int64_t patch = 8;
  std::int64_t stride = 4;
  std::int64_t width = 128;
  std::int64_t depth = 4;
  std::int64_t heads = 4;
  std::uint64_t seed = 0;
};

struct IdentityNet;

class IdentityEncoder {
 public:
  IdentityEncoder() = default;  // unloaded; encode throws StateError
  explicit IdentityEncoder(const IdentityEncoderConfig& config);

  static IdentityEncoder load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  void export_params(ParamBundle& bundle, const std::string& prefix = "id.") const;
  static IdentityEncoder from_bundle(const ParamBundle& bundle, const std::string& prefix = "id.");

  bool initialized() const { return net_ != nullptr; }
  const IdentityEncoderConfig& config() const;

  // [N, 3, R, R] -> [N, T, width]: patches linearly projected to the model
  // width, before position embeddings.
  torch::Tensor patch_tokens(const torch::Tensor& images) const;
  // [N, 3, R, R] (or [3, R, R]) -> [N, 512], unit norm per row.
  torch::Tensor encode(const torch::Tensor& images) const;
  // Pooled transformer features before the embedding head, [N, width].
  torch::Tensor features(const torch::Tensor& images) const;

  void freeze();
  bool frozen() const;
  void to(torch::Dtype dtype);
  std::uint64_t fingerprint() const;
  std::vector<torch::Tensor> parameters() const;
  torch::nn::Module& module();

 private:
  const IdentityNet& net() const;
  std::shared_ptr<IdentityNet> net_;
};

struct AttributeEncoderConfig {
  // Output channels of the stem and of the five stride-2 stages.
  std::vector<std::int64_t> channels{16, 24, 32, 48, 64, 96};
  std::int64_t expand = 4;
  std::uint64_t seed = 0;
};

struct ConvTrunk;

class AttributeEncoder {
 public:
  AttributeEncoder() = default;
  explicit AttributeEncoder(const AttributeEncoderConfig& config);

  static AttributeEncoder load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  void export_params(ParamBundle& bundle, const std::string& prefix = "attr.") const;
  static AttributeEncoder from_bundle(const ParamBundle& bundle, const std::string& prefix = "attr.");

  bool initialized() const { return net_ != nullptr; }
  const AttributeEncoderConfig& config() const { return config_; }

  // [N, 3, H, W] (any H, W >= 32) -> [N, 1792].
  torch::Tensor encode(const torch::Tensor& images) const;

  void to(torch::Dtype dtype);
  std::uint64_t fingerprint() const;
  std::vector<torch::Tensor> parameters() const;
  torch::nn::Module& module();

 private:
  const ConvTrunk& net() const;
  AttributeEncoderConfig config_;
  std::shared_ptr<ConvTrunk> net_;
};

// What a provider may know about an image besides its pixels.
struct FaceMeta {
  procfaces::IdentityParams identity;
  procfaces::AttributeParams attributes;
};

// Produces [N, 68, 2] pixel-coordinate landmarks. Providers that read
// pixels are differentiable in the images; metadata-driven ones are not.
class LandmarkProvider {
 public:
  virtual ~LandmarkProvider() = default;
  virtual torch::Tensor landmarks(const torch::Tensor& images, std::span<const FaceMeta> meta) const = 0;
  virtual bool uses_pixels() const = 0;
  virtual std::string name() const = 0;
};

// Exact landmarks from the renderer's factors; requires one FaceMeta per image.
class OracleLandmarks final : public LandmarkProvider {
 public:
  torch::Tensor landmarks(const torch::Tensor& images, std::span<const FaceMeta> meta) const override;
  bool uses_pixels() const override { return false; }
  std::string name() const override { return "oracle"; }
};

// Small convolutional regressor trained against the oracle; stands in for
// a pretrained landmark detector on images without metadata.
class LandmarkRegressor final : public LandmarkProvider {
 public:
  LandmarkRegressor() = default;
  LandmarkRegressor(std::int64_t resolution, std::uint64_t seed);

  static LandmarkRegressor load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  torch::Tensor landmarks(const torch::Tensor& images, std::span<const FaceMeta> meta) const override;
  torch::Tensor predict(const torch::Tensor& images) const;
  bool uses_pixels() const override { return true; }
  std::string name() const override { return "regressor"; }

  bool initialized() const { return net_ != nullptr; }
  std::int64_t resolution() const { return resolution_; }
  void freeze();
  std::vector<torch::Tensor> parameters() const;
  std::uint64_t fingerprint() const;
  torch::nn::Module& module();

 private:
  std::int64_t resolution_ = 0;
  std::uint64_t seed_ = 0;
  std::shared_ptr<torch::nn::Module> net_;
};

// Holder used by downstream code; throws StateError while unconfigured.
class Landmarks {
 public:
  Landmarks() = default;
  explicit Landmarks(std::shared_ptr<const LandmarkProvider> p) : provider_(std::move(p)) {}
  bool configured() const { return provider_ != nullptr; }
  const LandmarkProvider& provider() const;
  torch::Tensor operator()(const torch::Tensor& images, std::span<const FaceMeta> meta = {}) const;

 private:
  std::shared_ptr<const LandmarkProvider> provider_;
};

struct IdPretrainConfig {
  std::int64_t steps = 600;
  std::int64_t batch = 32;
  double lr = 1e-3;
  double held_out = 0.1;    // per-identity tail fraction kept for evaluation
  double scale = 16.0;      // cosine-softmax temperature
  double margin = 0.1;      // additive cosine margin on the true class
  std::int64_t landmark_steps = 1500;
  double landmark_lr = 3e-3;
  std::uint64_t seed = 0;
  IdentityEncoderConfig encoder;
};

struct IdPretrainResult {
  IdentityEncoder encoder;
  double held_out_accuracy = 0.0;
  double train_loss = 0.0;
};

// Classification pretraining on identity labels; the cosine head is
// discarded. Throws ArgumentError for fewer than two identities and
// TrainingError when the loss goes non-finite.
IdPretrainResult pretrain_identity_encoder(const procfaces::Corpus& corpus, const IdPretrainConfig& cfg);

// Mean pixel error on the held-out slice is reported through `held_out_error`.
LandmarkRegressor train_landmark_regressor(const procfaces::Corpus& corpus, std::int64_t steps,
                                           std::int64_t batch, double lr, std::uint64_t seed,
                                           double held_out = 0.1, double* held_out_error = nullptr);

// Split corpus indices: for each identity the trailing `fraction` of its
// images (at least one) go to the held-out side.
void split_by_identity(const procfaces::Corpus& corpus, double fraction, std::vector<std::int64_t>& train,
                       std::vector<std::int64_t>& held_out);

}  // namespace xswap
