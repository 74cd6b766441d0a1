#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

// Training objectives for the swap model. All functions are dtype-generic
// (float32 for training, float64 for gradient checks) and return scalar
// tensors so they compose with autograd.
namespace xswap::losses {

struct LossWeights {
  double lambda_id = 1.0;
  double lambda_lnd = 1.0;
  double lambda_rec = 0.02;
  double lambda_adv = 0.0001;  // applied in the separate adversarial generator step
  double alpha = 0.84;         // MS-SSIM share of the mix loss
  double r1_gamma = 10.0;

  // Throws ConfigError unless all weights are finite and nonnegative and
  // alpha lies in [0, 1].
  void validate() const;
};

// -1/2 E[log sigmoid(real)] - 1/2 E[log(1 - sigmoid(fake))]
torch::Tensor adv_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

// Non-saturating: -E[log sigmoid(fake)]. The saturating variant,
// 1/2 E[log(1 - sigmoid(fake))], is available for comparison.
torch::Tensor adv_g_loss(const torch::Tensor& fake_logits, bool saturating = false);

using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

// (gamma / 2) * mean_i ||d/dx critic(x_i)||^2 over the real batch. The graph
// is kept (create_graph) so the penalty can be backpropagated into the
// critic's parameters. Throws NumericError on non-finite gradients.
torch::Tensor r1_penalty(const Critic& critic, const torch::Tensor& real_batch, double gamma);

// 1 - cos(src, out), averaged over a batch of [N, D] (or single [D])
// embeddings. Throws ArgumentError on zero-norm inputs.
torch::Tensor id_loss(const torch::Tensor& src_emb, const torch::Tensor& out_emb);

// Euclidean norm of the flattened landmark difference, averaged over the
// batch. Accepts [68, 2] or [N, 68, 2].
torch::Tensor landmark_loss(const torch::Tensor& target, const torch::Tensor& out);

struct SsimOptions {
  std::int64_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 2.0;  // images in [-1, 1] are shifted to [0, 2]
};

// The five standard per-scale exponents.
const std::vector<double>& ms_ssim_base_weights();
// First `scales` exponents renormalized to sum to one.
std::vector<double> ms_ssim_weights(int scales);
// Largest scale count (<= 5) whose coarsest level still fits the window.
int max_scales(std::int64_t min_side, const SsimOptions& opt = {});

// Per-image MS-SSIM, shape [N]. Inputs [N, 3, H, W] or [3, H, W].
torch::Tensor ms_ssim_per_image(const torch::Tensor& x, const torch::Tensor& y, int scales,
                                const SsimOptions& opt = {});
// Batch mean of ms_ssim_per_image.
torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& y, int scales,
                      const SsimOptions& opt = {});

// alpha * (1 - MS-SSIM) + (1 - alpha) * mean |target - out|, using the
// largest scale count the image size supports.
torch::Tensor mix_loss(const torch::Tensor& target, const torch::Tensor& out, double alpha);

// Per-image mix loss, shape [N].
torch::Tensor mix_loss_per_image(const torch::Tensor& target, const torch::Tensor& out, double alpha);

// Gated reconstruction: mix loss for pairs whose same_flag is set, exactly
// zero (and no graph) otherwise. Batched form averages over all N pairs.
torch::Tensor rec_loss(const torch::Tensor& target, const torch::Tensor& out,
                       const std::vector<bool>& same_flags, double alpha);
torch::Tensor rec_loss(const torch::Tensor& target, const torch::Tensor& out, bool same_flag,
                       double alpha);

struct LossTerms {
  torch::Tensor id, lnd, rec;
};

// lambda_id * L_id + lambda_lnd * L_lnd + lambda_rec * L_rec.
// Throws NumericError if any term is non-finite.
torch::Tensor total_loss(const LossTerms& terms, const LossWeights& w);
double total_loss(double id, double lnd, double rec, const LossWeights& w);

// One row of train_log.tsv.
struct LossReport {
  std::int64_t step = 0;
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;

  double term(const std::string& name) const;
  void set(const std::string& name, double value);
  std::string tsv_header() const;
  std::string tsv_row() const;
};

// Appends the row, writing the header first when the file is new.
void append_log(const std::filesystem::path& path, const LossReport& report);

}  // namespace xswap::losses
