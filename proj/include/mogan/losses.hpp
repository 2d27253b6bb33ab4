#pragma once

#include <torch/torch.h>

#include <functional>

#include "mogan/generators.hpp"

namespace mogan {

struct LossWeights {
  double alpha = 50.0;
  double beta = 10.0;
  double lambda_gp = 1.0;

  void validate() const;
};

/// Per-branch weight schedule. ROI generators use beta_coarse at the two
/// coarsest scales and beta_fine elsewhere; background generators use
/// beta_background everywhere.
struct LossSchedule {
  double alpha = 50.0;
  double beta_coarse = 10.0;
  double beta_fine = 5.0;
  double beta_background = 10.0;
  double lambda_gp = 1.0;

  LossWeights at(BranchKind kind, int scale, int coarsest) const;
};

struct AdversarialTerms {
  torch::Tensor g_term;  // -mean(D(fake))
  torch::Tensor d_term;  // mean(D(fake)) - mean(D(real))
};

/// Wasserstein critic form.
AdversarialTerms adversarial_losses(const torch::Tensor& d_real, const torch::Tensor& d_fake);

enum class PenaltyPoint {
  /// x = eps * real + (1 - eps) * fake, eps ~ U(0,1).
  interpolate,
  /// Gradient taken at the fake sample itself.
  fake,
};

using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

/// (||grad_x sum(critic(x))||_2 - 1)^2 with the graph kept so the result can
/// be back-propagated into critic parameters. One eps draw per call.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               torch::Generator& generator, PenaltyPoint point = PenaltyPoint::interpolate);

/// 1 - cos(generated, target) on flattened tensors. When `mask` is given both
/// inputs are multiplied by it first. Throws on a zero-norm operand.
torch::Tensor cosine_loss(const torch::Tensor& generated, const torch::Tensor& target,
                          const torch::Tensor& mask = {});

/// Mean squared error over elements where mask = 1 (all elements without a mask).
torch::Tensor mse_loss(const torch::Tensor& generated, const torch::Tensor& target,
                       const torch::Tensor& mask = {});

/// L0 + alpha * L1 + beta * L2
torch::Tensor generator_total(const torch::Tensor& l0_g, const torch::Tensor& l1, const torch::Tensor& l2,
                              const LossWeights& weights);
/// L0 + lambda * GP
torch::Tensor discriminator_total(const torch::Tensor& l0_d, const torch::Tensor& gp,
                                  const LossWeights& weights);

double generator_total(double l0_g, double l1, double l2, const LossWeights& weights);
double discriminator_total(double l0_d, double gp, const LossWeights& weights);

}  // namespace mogan
