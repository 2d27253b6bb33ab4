#include "mogan/losses.hpp"

#include <sstream>

namespace mogan {

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || lambda_gp < 0) {
    throw ValidationError("loss weights must be non-negative");
  }
}

LossWeights LossSchedule::at(BranchKind kind, int scale, int coarsest) const {
  LossWeights w;
  w.alpha = alpha;
  w.lambda_gp = lambda_gp;
  if (kind == BranchKind::background) {
    w.beta = beta_background;
  } else {
    w.beta = scale >= coarsest - 1 ? beta_coarse : beta_fine;
  }
  w.validate();
  return w;
}

AdversarialTerms adversarial_losses(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  return AdversarialTerms{-d_fake.mean(), d_fake.mean() - d_real.mean()};
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               torch::Generator& generator, PenaltyPoint point) {
  if (real.sizes() != fake.sizes()) {
    throw ValidationError("gradient penalty needs equal-shape real and fake inputs");
  }
  // The penalty is defined through a gradient, so it needs autograd even
  // when the caller has it switched off.
  torch::AutoGradMode grad_mode(true);
  torch::Tensor x;
  if (point == PenaltyPoint::interpolate) {
    auto eps = torch::rand({1}, generator, real.options().requires_grad(false));
    x = (eps * real.detach() + (1 - eps) * fake.detach());
  } else {
    x = fake.detach().clone();
  }
  x.set_requires_grad(true);
  auto out = critic(x);
  torch::Tensor grad;
  if (out.requires_grad()) {
    grad = torch::autograd::grad({out.sum()}, {x}, {}, /*retain_graph=*/true,
                                 /*create_graph=*/true, /*allow_unused=*/true)[0];
  }
  if (!grad.defined()) {
    grad = torch::zeros_like(x);
  }
  if (!torch::isfinite(grad).all().item<bool>()) {
    throw Error("gradient penalty: non-finite critic gradient");
  }
  auto norm = grad.reshape({grad.size(0), -1}).norm(2, 1);
  return (norm - 1).pow(2).mean();
}

torch::Tensor cosine_loss(const torch::Tensor& generated, const torch::Tensor& target,
                          const torch::Tensor& mask) {
  if (generated.sizes() != target.sizes()) {
    throw ValidationError("cosine loss needs equal-shape inputs");
  }
  auto a = mask.defined() ? generated * mask : generated;
  auto b = mask.defined() ? target * mask : target;
  a = a.reshape({-1});
  b = b.reshape({-1});
  auto na = a.norm();
  auto nb = b.norm();
  if (na.item<double>() == 0.0 || nb.item<double>() == 0.0) {
    throw ValidationError("cosine loss undefined for a zero-norm operand");
  }
  return 1 - torch::dot(a, b) / (na * nb);
}

torch::Tensor mse_loss(const torch::Tensor& generated, const torch::Tensor& target,
                       const torch::Tensor& mask) {
  if (generated.sizes() != target.sizes()) {
    std::ostringstream msg;
    msg << "mse loss shape mismatch " << generated.sizes() << " vs " << target.sizes();
    throw ValidationError(msg.str());
  }
  auto sq = (generated - target).pow(2);
  if (!mask.defined()) {
    return sq.mean();
  }
  auto m = mask.expand_as(sq);
  auto count = m.sum();
  if (count.item<double>() == 0.0) {
    throw ValidationError("mse loss mask hides every element");
  }
  return (sq * m).sum() / count;
}

torch::Tensor generator_total(const torch::Tensor& l0_g, const torch::Tensor& l1, const torch::Tensor& l2,
                              const LossWeights& weights) {
  return l0_g + weights.alpha * l1 + weights.beta * l2;
}

torch::Tensor discriminator_total(const torch::Tensor& l0_d, const torch::Tensor& gp,
                                  const LossWeights& weights) {
  return l0_d + weights.lambda_gp * gp;
}

double generator_total(double l0_g, double l1, double l2, const LossWeights& weights) {
  return l0_g + weights.alpha * l1 + weights.beta * l2;
}

double discriminator_total(double l0_d, double gp, const LossWeights& weights) {
  return l0_d + weights.lambda_gp * gp;
}

}  // namespace mogan
