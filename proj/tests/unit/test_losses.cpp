#include <gtest/gtest.h>

#include "mogan/losses.hpp"
#include "support.hpp"

using namespace mogan;
using mogan::testing::double_parameters;
using mogan::testing::grad_check;

namespace {

torch::Tensor drandn(torch::IntArrayRef shape, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::kDouble);
}

torch::Generator gen(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

}  // namespace

TEST(Adversarial, HandValues) {
  auto real = torch::tensor({1.0, 3.0});
  auto fake = torch::tensor({0.0, 2.0});
  auto t = adversarial_losses(real, fake);
  EXPECT_DOUBLE_EQ(t.d_term.item<double>(), -1.0);
  EXPECT_DOUBLE_EQ(t.g_term.item<double>(), -1.0);

  auto same = adversarial_losses(real, real);
  EXPECT_DOUBLE_EQ(same.d_term.item<double>(), 0.0);

  auto twos = adversarial_losses(real, torch::full({4, 4}, 2.0));
  EXPECT_DOUBLE_EQ(twos.g_term.item<double>(), -2.0);
}

TEST(GradientPenalty, UnitNormLinearCriticIsZero) {
  auto v = drandn({1, 3, 4, 4}, 1);
  v = v / v.norm();
  Critic critic = [&](const torch::Tensor& x) { return (x * v).sum(); };
  auto g = gen(2);
  auto gp = gradient_penalty(critic, drandn({1, 3, 4, 4}, 3), drandn({1, 3, 4, 4}, 4), g);
  EXPECT_NEAR(gp.item<double>(), 0.0, 1e-24);
}

TEST(GradientPenalty, ZeroExactlyAtUnitNorm) {
  auto v = drandn({1, 3, 4, 4}, 5);
  v = v / v.norm();
  for (double s : {0.0, 0.5, 0.9, 1.0, 1.1, 2.0, 3.0}) {
    Critic critic = [&](const torch::Tensor& x) { return (x * v * s).sum(); };
    auto g = gen(6);
    const double gp = gradient_penalty(critic, drandn({1, 3, 4, 4}, 7), drandn({1, 3, 4, 4}, 8), g).item<double>();
    EXPECT_NEAR(gp, (s - 1) * (s - 1), 1e-12) << "s = " << s;
    EXPECT_EQ(gp == 0.0, s == 1.0);
  }
}

TEST(GradientPenalty, TwiceSumOnOnePixel) {
  Critic critic = [](const torch::Tensor& x) { return 2 * x.sum(); };
  auto g = gen(9);
  auto gp = gradient_penalty(critic, torch::ones({1, 1, 1, 1}), torch::zeros({1, 1, 1, 1}), g);
  EXPECT_DOUBLE_EQ(gp.item<double>(), 1.0);
}

TEST(GradientPenalty, ConstantCritic) {
  Critic constant = [](const torch::Tensor&) { return torch::full({1, 1, 2, 2}, 3.0f); };
  auto g = gen(10);
  EXPECT_DOUBLE_EQ(gradient_penalty(constant, torch::rand({1, 3, 2, 2}), torch::rand({1, 3, 2, 2}), g).item<double>(),
                   1.0);
  Critic detached = [](const torch::Tensor& x) { return x.sum() * 0; };
  EXPECT_DOUBLE_EQ(gradient_penalty(detached, torch::rand({1, 3, 2, 2}), torch::rand({1, 3, 2, 2}), g).item<double>(),
                   1.0);
}

TEST(GradientPenalty, OneDrawPerCallAndSeeded) {
  BlockConfig cfg;
  cfg.base_channels = 4;
  cfg.discriminator_layers = 3;
  MarkovianDiscriminator d(cfg);
  Critic critic = [&](const torch::Tensor& x) { return d->forward(x); };
  auto real = torch::rand({1, 3, 8, 8}), fake = torch::rand({1, 3, 8, 8});
  auto g1 = gen(11), g2 = gen(11);
  const double a = gradient_penalty(critic, real, fake, g1).item<double>();
  const double b = gradient_penalty(critic, real, fake, g2).item<double>();
  EXPECT_EQ(a, b);
  // The generator advanced by exactly one uniform draw.
  auto g3 = gen(11);
  torch::rand({1}, g3);
  EXPECT_EQ(torch::rand({1}, g1).item<float>(), torch::rand({1}, g3).item<float>());
}

TEST(GradientPenalty, GradCheckThroughCritic) {
  BlockConfig cfg;
  cfg.base_channels = 3;
  cfg.discriminator_layers = 3;
  MarkovianDiscriminator d(cfg);
  {
    torch::NoGradGuard no_grad;
    auto g = gen(12);
    for (auto& p : d->parameters()) p.normal_(0.0, 0.4, g);
  }
  auto params = double_parameters(*d);
  auto real = drandn({1, 3, 8, 8}, 13), fake = drandn({1, 3, 8, 8}, 14);
  Critic critic = [&](const torch::Tensor& x) { return d->forward(x); };
  auto r = grad_check(
      [&] {
        auto g = gen(15);
        return gradient_penalty(critic, real, fake, g);
      },
      params, 12);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Cosine, IdentityOrthogonalOpposite) {
  auto a = torch::tensor({1.0, 0.0});
  auto b = torch::tensor({0.0, 1.0});
  EXPECT_NEAR(cosine_loss(a, a).item<double>(), 0.0, 1e-15);
  EXPECT_NEAR(cosine_loss(a, b).item<double>(), 1.0, 1e-15);
  EXPECT_NEAR(cosine_loss(a, -a).item<double>(), 2.0, 1e-15);
  auto img = torch::rand({1, 3, 5, 5}, torch::kDouble) + 0.1;
  EXPECT_NEAR(cosine_loss(img, img).item<double>(), 0.0, 1e-12);
}

TEST(Cosine, ScaleInvariantAndMasked) {
  auto a = drandn({1, 3, 6, 6}, 16), b = drandn({1, 3, 6, 6}, 17);
  const double base = cosine_loss(a, b).item<double>();
  for (double k : {0.01, 0.5, 3.0, 1e4}) EXPECT_NEAR(cosine_loss(k * a, b).item<double>(), base, 1e-12);

  auto mask = torch::ones({1, 1, 6, 6}, torch::kDouble);
  mask.slice(2, 0, 3).zero_();
  auto c = b.clone();
  c.slice(2, 0, 3).copy_(drandn({1, 3, 3, 6}, 18));
  EXPECT_NEAR(cosine_loss(c, b, mask).item<double>(), 0.0, 1e-12);
  EXPECT_THROW(cosine_loss(torch::zeros({4}), torch::ones({4})), ValidationError);
}

TEST(Mse, HandValuesAndMask) {
  auto a = torch::rand({1, 3, 4, 4}, torch::kDouble);
  EXPECT_EQ(mogan::mse_loss(a, a).item<double>(), 0.0);
  EXPECT_NEAR(mogan::mse_loss(a + 0.5, a).item<double>(), 0.25, 1e-15);

  auto b = a.clone();
  b[0][1][2][3] += 1.0;
  auto mask = torch::ones({1, 1, 4, 4}, torch::kDouble);
  mask[0][0][2][3] = 0;
  EXPECT_EQ(mogan::mse_loss(b, a, mask).item<double>(), 0.0);
  EXPECT_NEAR(mogan::mse_loss(b, a).item<double>(), 1.0 / 48, 1e-15);
  EXPECT_THROW(mogan::mse_loss(a, a, torch::zeros({1, 1, 4, 4}, torch::kDouble)), ValidationError);
}

TEST(LossGradients, CosineAndMse) {
  auto a = drandn({1, 3, 4, 4}, 19).requires_grad_(true);
  auto b = drandn({1, 3, 4, 4}, 20);
  auto mask = (torch::rand({1, 1, 4, 4}, gen(21)) > 0.3).to(torch::kDouble);
  EXPECT_LT(grad_check([&] { return cosine_loss(a, b); }, {a}, 48).max_rel_error, 1e-3);
  EXPECT_LT(grad_check([&] { return cosine_loss(a, b, mask); }, {a}, 48).max_rel_error, 1e-3);
  EXPECT_LT(grad_check([&] { return mogan::mse_loss(a, b, mask); }, {a}, 48).max_rel_error, 1e-3);
  auto dr = drandn({1, 1, 4, 4}, 22).requires_grad_(true);
  auto df = drandn({1, 1, 4, 4}, 23).requires_grad_(true);
  EXPECT_LT(grad_check([&] { return adversarial_losses(dr, df).d_term; }, {dr, df}).max_rel_error, 1e-3);
  EXPECT_LT(grad_check([&] { return adversarial_losses(dr, df).g_term; }, {df}).max_rel_error, 1e-3);
}

TEST(Totals, HandArithmetic) {
  LossWeights w;
  EXPECT_NEAR(generator_total(1.0, 0.1, 0.01, w), 6.1, 1e-9);
  EXPECT_NEAR(discriminator_total(-1.0, 0.5, w), -0.5, 1e-9);
  LossWeights zero{0.0, 0.0, 1.0};
  EXPECT_EQ(generator_total(0.37, 5.0, 9.0, zero), 0.37);
  auto t = generator_total(torch::tensor(1.0, torch::kDouble), torch::tensor(0.1, torch::kDouble),
                           torch::tensor(0.01, torch::kDouble), w);
  EXPECT_NEAR(t.item<double>(), 6.1, 1e-9);
}

TEST(Schedule, BetaByScale) {
  LossSchedule s;
  const int top = 5;
  for (int n = 0; n <= top; ++n) {
    EXPECT_EQ(s.at(BranchKind::roi, n, top).beta, n >= top - 1 ? 10.0 : 5.0) << n;
    EXPECT_EQ(s.at(BranchKind::background, n, top).beta, 10.0);
    EXPECT_EQ(s.at(BranchKind::roi, n, top).alpha, 50.0);
    EXPECT_EQ(s.at(BranchKind::roi, n, top).lambda_gp, 1.0);
  }
}
