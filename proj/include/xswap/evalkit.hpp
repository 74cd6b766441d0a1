#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "xswap/encoders.hpp"
#include "xswap/pipeline.hpp"
#include "xswap/procfaces.hpp"
#include "xswap/training.hpp"

// Evaluation metrics: identity similarity, pose/expression error through
// factor probes, and FID on probe features.
namespace xswap::eval {

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};

// Sample mean and unbiased covariance of the rows (n >= 2).
GaussianStats gaussian_stats(const Eigen::MatrixXd& features);
GaussianStats gaussian_stats(const torch::Tensor& features);

// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)). Throws ArgumentError on
// a dimension mismatch and NumericError if a covariance is clearly not PSD.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

using FeatureExtractor = std::function<torch::Tensor(const torch::Tensor&)>;

// Runs the extractor in chunks of `batch` under no-grad; [N, d] float64.
torch::Tensor extract_features(const FeatureExtractor& f, const torch::Tensor& images, std::int64_t batch = 100);
double fid(const torch::Tensor& real, const torch::Tensor& fake, const FeatureExtractor& f, std::int64_t batch = 100);
// The identity encoder's pooled features.
FeatureExtractor probe_features(const IdentityEncoder& encoder);

// Mean cosine between embeddings of paired images.
double identity_similarity(const IdentityEncoder& encoder, const torch::Tensor& a, const torch::Tensor& b,
                           std::int64_t batch = 100);

// Regresses (yaw in degrees, mouth_curve) from pixels.
class FactorProbe {
 public:
  FactorProbe() = default;
  FactorProbe(std::int64_t resolution, std::uint64_t seed);

  static FactorProbe load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // [N, 3, R, R] -> [N, 2].
  torch::Tensor predict(const torch::Tensor& images) const;
  bool initialized() const { return net_ != nullptr; }
  std::int64_t resolution() const { return resolution_; }
  std::vector<torch::Tensor> parameters() const;
  std::uint64_t fingerprint() const;
  void freeze();

 private:
  std::int64_t resolution_ = 0;
  std::uint64_t seed_ = 0;
  std::shared_ptr<torch::nn::Module> net_;
};

// [N, 2] (yaw, mouth_curve) labels taken from metadata.
torch::Tensor factor_labels(std::span<const FaceMeta> meta);
torch::Tensor factor_labels(const procfaces::Corpus& corpus);

struct ProbeConfig {
  std::int64_t steps = 3000;
  std::int64_t batch = 32;
  double lr = 3e-3;
  double held_out = 0.1;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  FactorProbe probe;
  double yaw_mae = 0.0;    // held-out, degrees
  double mouth_mae = 0.0;  // held-out
};

ProbeResult train_factor_probes(const procfaces::Corpus& corpus, const ProbeConfig& cfg);

struct PoseExprError {
  double pose = 0.0;  // mean |yaw difference|, degrees
  double expr = 0.0;  // mean |mouth_curve difference|
};

// Target factors probed from pixels.
PoseExprError pose_expr_error(const FactorProbe& probe, const torch::Tensor& targets, const torch::Tensor& swapped);
// Target factors from metadata.
PoseExprError pose_expr_error(const FactorProbe& probe, std::span<const FaceMeta> targets, const torch::Tensor& swapped);

struct EvalReport {
  std::int64_t step = 0;
  double id_similarity = 0.0;
  double pose_error = 0.0;
  double expr_error = 0.0;
  double fid = 0.0;
  std::int64_t pairs = 0;
  std::int64_t reals = 0;
};

std::string eval_tsv_header();
std::string eval_tsv_row(const EvalReport& r);
// Writes the header first if the file does not exist yet.
void append_eval_report(const std::filesystem::path& path, const EvalReport& r);

// Grid with the sources on the first row, targets on the second and swaps on
// the third.
void write_swap_montage(const std::filesystem::path& path, const torch::Tensor& sources, const torch::Tensor& targets,
                        const torch::Tensor& swaps);

struct SwapEvalConfig {
  std::int64_t pairs = 1000;
  std::int64_t batch = 50;
  std::uint64_t seed = 0;
};

// Everything measured on one set of held-out pairs.
struct SwapEval {
  EvalReport report;            // id vs source, pose/expr vs target, FID vs reals
  double id_to_target = 0.0;    // mean cosine(embed(target), embed(swap))
  double pose_vs_source = 0.0;  // probe pose error of the swap against the source
  double expr_vs_source = 0.0;
  double self_ms_ssim = 0.0;    // mean ms_ssim(swap(x, x), x) over the targets
  torch::Tensor sources, targets, swaps;  // first few pairs, for the montage
};

// Source/target pairs of distinct held-out records drawn with cfg.seed.
std::vector<PairSample> eval_pairs(const SwapDataset& held_out, std::int64_t n, std::uint64_t seed);

SwapEval evaluate_swaps(const FrozenParts& frozen, const SwapNets& nets, const FactorProbe& probe,
                        const SwapDataset& held_out, const torch::Tensor& reals, const SwapEvalConfig& cfg);

// FID of swaps produced by arbitrary nets on the same pairs (e.g. an
// untrained initialization).
double swap_fid(const FrozenParts& frozen, const SwapNets& nets, const SwapDataset& held_out,
                const torch::Tensor& reals, const SwapEvalConfig& cfg);

}  // namespace xswap::eval
