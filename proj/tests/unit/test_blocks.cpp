#include <gtest/gtest.h>

#include "mogan/blocks.hpp"
#include "support.hpp"

using namespace mogan;
using mogan::testing::double_parameters;
using mogan::testing::grad_check;

namespace {

constexpr double kGradTol = 1e-3;

torch::Tensor drandn(torch::IntArrayRef shape, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::kDouble);
}

void randomise(torch::nn::Module& m, uint64_t seed, double std = 0.3) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : m.parameters()) p.normal_(0.0, std, gen);
}

}  // namespace

TEST(Modulate, HandArithmetic) {
  auto x = torch::tensor({1.0f, 2.0f}).view({1, 2, 1, 1});
  StyleParams s{torch::tensor({2.0f, 3.0f}).view({1, 2, 1, 1}), torch::tensor({1.0f, -1.0f}).view({1, 2, 1, 1})};
  auto y = modulate(x, s);
  EXPECT_EQ(y[0][0][0][0].item<float>(), 3.0f);
  EXPECT_EQ(y[0][1][0][0].item<float>(), 5.0f);
}

TEST(Modulate, IdentityAndConstant) {
  auto x = torch::randn({1, 4, 5, 6});
  EXPECT_TRUE(torch::equal(modulate(x, StyleParams::identity(x)), x));
  StyleParams c{torch::zeros_like(x), torch::full_like(x, 0.7f)};
  EXPECT_TRUE(torch::equal(modulate(x, c), torch::full_like(x, 0.7f)));
  StyleParams bad{torch::ones({1, 4, 5, 5}), torch::zeros({1, 4, 5, 5})};
  EXPECT_THROW(modulate(x, bad), ValidationError);
}

TEST(StyleInjector, ZeroParametersGiveIdentity) {
  StyleInjector inj(8, 3);
  {
    torch::NoGradGuard no_grad;
    for (auto& p : inj->parameters()) p.zero_();
  }
  auto x = torch::randn({1, 8, 12, 10});
  auto s = inj->forward(torch::rand({1, 3, 12, 10}), x.sizes());
  EXPECT_TRUE(torch::equal(s.weight, torch::ones_like(x)));
  EXPECT_TRUE(torch::equal(s.bias, torch::zeros_like(x)));
  EXPECT_TRUE(torch::equal(modulate(x, s), x));
}

TEST(StyleInjector, DifferentImagesDifferentParams) {
  StyleInjector inj(8, 3);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  init_weights(*inj, gen);
  auto target = std::vector<int64_t>{1, 8, 16, 16};
  auto a = inj->forward(mogan::testing::pattern_image(16, 16, 1).batched(), target);
  auto b = inj->forward(mogan::testing::pattern_image(16, 16, 2).batched(), target);
  EXPECT_FALSE(torch::equal(a.weight, b.weight));
  EXPECT_FALSE(torch::equal(a.bias, b.bias));
  EXPECT_EQ(a.weight.sizes(), torch::IntArrayRef(target));
}

TEST(StyleInjector, DampingScalesTheDeviation) {
  StyleInjector full(4, 2, 1.0), half(4, 2, 0.5);
  randomise(*full, 3);
  {
    torch::NoGradGuard no_grad;
    auto src = full->parameters();
    auto dst = half->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
  }
  auto img = torch::rand({1, 3, 8, 8});
  std::vector<int64_t> target{1, 4, 8, 8};
  auto a = full->forward(img, target);
  auto b = half->forward(img, target);
  EXPECT_TRUE(torch::allclose(b.weight - 1, 0.5 * (a.weight - 1), 1e-6, 1e-7));
  EXPECT_TRUE(torch::allclose(b.bias, 0.5 * a.bias, 1e-6, 1e-7));
}

TEST(StyleInjector, GradCheck) {
  StyleInjector inj(4, 3);
  randomise(*inj, 5);
  auto params = double_parameters(*inj);
  auto img = drandn({1, 3, 8, 8}, 6);
  auto rw = drandn({1, 4, 8, 8}, 7), rb = drandn({1, 4, 8, 8}, 8);
  auto r = grad_check(
      [&] {
        auto s = inj->forward(img, rw.sizes());
        return (s.weight * rw).sum() + (s.bias * rb).sum();
      },
      params);
  EXPECT_LT(r.max_rel_error, kGradTol);
  EXPECT_GT(r.checked, 0);
}

TEST(DeformConv, ZeroOffsetsReduceToConv) {
  DeformConv2d dc(5, 7, 3);
  auto x = torch::randn({1, 5, 9, 11});
  auto expected = torch::conv2d(x, dc->weight(), dc->bias(), 1, 1);
  EXPECT_LE((dc->forward(x) - expected).abs().max().item<double>(), 1e-6);
}

TEST(DeformConv, ConstantInputConstantInterior) {
  DeformConv2d dc(2, 3, 3);
  {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    dc->offset_conv()->weight.uniform_(-0.05, 0.05, gen);
    dc->offset_conv()->bias.uniform_(-0.4, 0.4, gen);
  }
  auto x = torch::full({1, 2, 12, 12}, 0.8f);
  auto y = dc->forward(x).slice(2, 2, 10).slice(3, 2, 10);
  for (int c = 0; c < 3; ++c) {
    auto ch = y[0][c];
    EXPECT_LE((ch - ch.mean()).abs().max().item<double>(), 1e-5);
  }
}

TEST(DeformConv, ImpulseShiftMatchesGatherOracle) {
  const int64_t h = 9, w = 9;
  DeformConv2d dc(1, 1, 3);
  auto x = torch::zeros({1, 1, h, w});
  x[0][0][4][4] = 1.0f;
  auto offsets = torch::zeros({1, 18, h, w});
  offsets.slice(1, 0, 18, 2).fill_(1.0f);  // dy = +1 for every tap
  auto y = dc->forward_with_offsets(x, offsets);

  // out(y, x) = b + sum_ij w_ij * X(y + i - 1 + 1, x + j - 1)
  auto wt = dc->weight();
  const float b = dc->bias()[0].item<float>();
  for (int64_t oy = 0; oy < h; ++oy) {
    for (int64_t ox = 0; ox < w; ++ox) {
      float acc = b;
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          const int64_t sy = oy + i - 1 + 1, sx = ox + j - 1;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) acc += wt[0][0][i][j].item<float>() * x[0][0][sy][sx].item<float>();
        }
      }
      EXPECT_NEAR(y[0][0][oy][ox].item<float>(), acc, 1e-6);
    }
  }
  // Same as the plain response moved up by one row.
  auto plain = torch::conv2d(x, wt, dc->bias(), 1, 1);
  EXPECT_TRUE(torch::allclose(y.slice(2, 0, h - 1), plain.slice(2, 1, h), 1e-6, 1e-6));
}

TEST(DeformConv, BilinearGatherFractional) {
  auto x = torch::arange(16, torch::kDouble).view({1, 1, 4, 4});
  auto py = torch::tensor({1.5}, torch::kDouble).view({1, 1, 1, 1});
  auto px = torch::tensor({2.25}, torch::kDouble).view({1, 1, 1, 1});
  // Bilinear of f(y, x) = 4y + x is exact: 4 * 1.5 + 2.25.
  EXPECT_NEAR(bilinear_gather(x, py, px).item<double>(), 8.25, 1e-12);
  auto outside = bilinear_gather(x, torch::full({1, 1, 1, 1}, -3.0, torch::kDouble), px);
  EXPECT_EQ(outside.item<double>(), 0.0);
}

TEST(DeformConv, GradCheck) {
  DeformConv2d dc(3, 2, 3);
  randomise(*dc, 9, 0.4);
  auto params = double_parameters(*dc);
  auto x = drandn({1, 3, 6, 6}, 10).requires_grad_(true);
  params.push_back(x);
  auto r = drandn({1, 2, 6, 6}, 11);
  auto res = grad_check([&] { return (dc->forward(x) * r).sum(); }, params, 24);
  EXPECT_LT(res.max_rel_error, kGradTol);
}

TEST(GatedConv, HandArithmetic) {
  GatedConv2d g(1, 1, 1);
  {
    torch::NoGradGuard no_grad;
    g->feature()->weight.fill_(3.0f);
    g->feature()->bias.zero_();
    g->gate()->weight.zero_();
    g->gate()->bias.zero_();
  }
  auto y = g->forward(torch::full({1, 1, 1, 1}, 2.0f));
  EXPECT_FLOAT_EQ(y.item<float>(), 3.0f);
}

TEST(GatedConv, SaturatedGates) {
  GatedConv2d g(2, 3, 3);
  auto x = torch::randn({1, 2, 6, 6});
  {
    torch::NoGradGuard no_grad;
    g->gate()->weight.zero_();
    g->gate()->bias.fill_(50.0f);
  }
  EXPECT_TRUE(torch::allclose(g->forward(x), g->feature()->forward(x), 1e-5, 1e-6));
  {
    torch::NoGradGuard no_grad;
    g->gate()->bias.fill_(-50.0f);
  }
  EXPECT_LE(g->forward(x).abs().max().item<double>(), 1e-15);
}

TEST(GatedConv, GradCheck) {
  GatedConv2d g(3, 4, 3);
  randomise(*g, 12);
  auto params = double_parameters(*g);
  auto x = drandn({1, 3, 8, 8}, 13);
  auto r = drandn({1, 4, 8, 8}, 14);
  auto res = grad_check([&] { return (g->forward(x) * r).sum(); }, params);
  EXPECT_LT(res.max_rel_error, kGradTol);
}

TEST(ChannelAttention, ScalarPathOracle) {
  ChannelAttention eca(3);
  {
    torch::NoGradGuard no_grad;
    eca->conv()->weight.copy_(torch::tensor({0.5f, -1.0f, 2.0f}).view({1, 1, 3}));
    eca->conv()->bias.fill_(0.1f);
  }
  auto x = torch::zeros({1, 2, 2, 2});
  x[0][0].fill_(1.0f);
  x[0][1].fill_(3.0f);
  // Zero-padded 1-D conv over channel means m = (1, 3).
  const double g0 = 1 / (1 + std::exp(-(-1.0 * 1 + 2.0 * 3 + 0.1)));
  const double g1 = 1 / (1 + std::exp(-(0.5 * 1 - 1.0 * 3 + 0.1)));
  auto gates = eca->gates(x).view({2});
  EXPECT_NEAR(gates[0].item<double>(), g0, 1e-6);
  EXPECT_NEAR(gates[1].item<double>(), g1, 1e-6);
  EXPECT_NE(gates[0].item<double>(), gates[1].item<double>());
  auto y = eca->forward(x);
  EXPECT_NEAR(y[0][1][0][0].item<double>(), 3 * g1, 1e-6);
}

TEST(ChannelAttention, ZeroInputAndUnitGates) {
  ChannelAttention eca(3);
  EXPECT_EQ(eca->forward(torch::zeros({1, 4, 3, 3})).abs().sum().item<double>(), 0.0);
  {
    torch::NoGradGuard no_grad;
    eca->conv()->weight.zero_();
    eca->conv()->bias.fill_(100.0f);
  }
  auto x = torch::randn({1, 4, 3, 3});
  EXPECT_TRUE(torch::equal(eca->forward(x), x));
}

TEST(ChannelAttention, GradCheck) {
  ChannelAttention eca(3);
  randomise(*eca, 15, 0.5);
  auto params = double_parameters(*eca);
  auto x = drandn({1, 6, 5, 5}, 16).requires_grad_(true);
  params.push_back(x);
  auto r = drandn({1, 6, 5, 5}, 17);
  auto res = grad_check([&] { return (eca->forward(x) * r).sum(); }, params);
  EXPECT_LT(res.max_rel_error, kGradTol);
}

TEST(Discriminator, ShapeLaw) {
  MarkovianDiscriminator d(BlockConfig{});
  auto a = d->forward(torch::rand({1, 3, 20, 16}));
  auto b = d->forward(torch::rand({1, 3, 20, 32}));
  EXPECT_EQ(a.size(1), 1);
  EXPECT_EQ(a.size(3), 16);
  EXPECT_EQ(b.size(3), 32);
  EXPECT_THROW(d->forward(torch::rand({1, 3, 10, 30})), ValidationError);
}

TEST(Discriminator, ConstantWeightsConstantInput) {
  MarkovianDiscriminator d(BlockConfig{});
  {
    torch::NoGradGuard no_grad;
    for (auto& p : d->parameters()) p.fill_(0.01f);
  }
  // Away from the zero padding the map is constant.
  auto m = d->forward(torch::full({1, 3, 30, 30}, 0.5f)).slice(2, 5, 25).slice(3, 5, 25);
  EXPECT_LE((m - m.mean()).abs().max().item<double>(), 1e-6 * m.abs().max().item<double>());
}

TEST(Discriminator, ReceptiveFieldImpulseSweep) {
  MarkovianDiscriminator d(BlockConfig{});
  EXPECT_EQ(d->receptive_field(), 11);
  {
    torch::NoGradGuard no_grad;
    for (auto& p : d->named_parameters()) {
      if (p.key().find("bias") != std::string::npos) {
        p.value().zero_();
      } else {
        p.value().fill_(0.1f);
      }
    }
  }
  auto x = torch::zeros({1, 3, 31, 31});
  x[0][0][15][15] = 1.0f;
  auto m = d->forward(x)[0][0];
  auto rows = (m.abs() > 0).any(1).nonzero();
  auto cols = (m.abs() > 0).any(0).nonzero();
  EXPECT_EQ(rows.size(0), 11);
  EXPECT_EQ(cols.size(0), 11);
}

TEST(Discriminator, GradCheck) {
  BlockConfig cfg;
  cfg.base_channels = 4;
  cfg.discriminator_layers = 3;
  MarkovianDiscriminator d(cfg);
  randomise(*d, 18);
  auto params = double_parameters(*d);
  auto x = drandn({1, 3, 8, 8}, 19).requires_grad_(true);
  params.push_back(x);
  auto res = grad_check([&] { return d->score(x); }, params);
  EXPECT_LT(res.max_rel_error, kGradTol);
}

TEST(Discriminator, DefaultDepthGradCheck) {
  BlockConfig cfg;
  cfg.base_channels = 4;
  MarkovianDiscriminator d(cfg);
  randomise(*d, 20);
  auto params = double_parameters(*d);
  auto x = drandn({1, 3, 11, 11}, 21);
  auto res = grad_check([&] { return d->score(x); }, params, 8);
  EXPECT_LT(res.max_rel_error, kGradTol);
}

TEST(ResBlocks, CompositionAndAblation) {
  BlockConfig cfg;
  RoiResBlock full(cfg);
  EXPECT_EQ(full->layer_kinds(), (std::vector<std::string>{"batchnorm", "leaky_relu", "conv", "batchnorm", "leaky_relu",
                                                           "deformable_conv", "channel_attention", "skip"}));
  cfg.deform_enabled = false;
  cfg.attention_enabled = false;
  RoiResBlock plain(cfg);
  EXPECT_EQ(plain->layer_kinds(),
            (std::vector<std::string>{"batchnorm", "leaky_relu", "conv", "batchnorm", "leaky_relu", "conv", "skip"}));
  for (const auto& p : plain->named_parameters()) {
    EXPECT_EQ(p.key().find("deform"), std::string::npos);
    EXPECT_EQ(p.key().find("attention"), std::string::npos);
  }
  BackgroundResBlock bg(BlockConfig{});
  EXPECT_EQ(bg->layer_kinds(),
            (std::vector<std::string>{"instancenorm", "elu", "gated_conv", "instancenorm", "elu", "gated_conv", "skip"}));
}

TEST(ResBlocks, GradCheck) {
  BlockConfig cfg;
  cfg.base_channels = 4;
  RoiResBlock roi(cfg);
  randomise(*roi, 22, 0.3);
  auto rp = double_parameters(*roi);
  auto x = drandn({1, 4, 6, 6}, 23);
  auto r = drandn({1, 4, 6, 6}, 24);
  EXPECT_LT(grad_check([&] { return (roi->forward(x) * r).sum(); }, rp, 8).max_rel_error, kGradTol);

  BackgroundResBlock bg(cfg);
  randomise(*bg, 25, 0.3);
  auto bp = double_parameters(*bg);
  EXPECT_LT(grad_check([&] { return (bg->forward(x) * r).sum(); }, bp, 8).max_rel_error, kGradTol);
}

TEST(InitWeights, SeededAndOffsetsZero) {
  BlockConfig cfg;
  RoiResBlock a(cfg), b(cfg);
  auto g1 = at::make_generator<at::CPUGeneratorImpl>(77);
  auto g2 = at::make_generator<at::CPUGeneratorImpl>(77);
  init_weights(*a, g1);
  init_weights(*b, g2);
  EXPECT_EQ(parameter_digest(*a), parameter_digest(*b));
  for (const auto& p : a->named_parameters()) {
    if (p.key().find("offset") != std::string::npos) EXPECT_EQ(p.value().abs().sum().item<double>(), 0.0) << p.key();
  }
}
