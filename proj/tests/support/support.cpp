#include "support.hpp"

#include <cmath>
#include <random>

namespace mogan::testing {

GradCheck grad_check(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& wrt, int per_tensor,
                     double eps, double floor) {
  for (const auto& t : wrt) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  auto out = f();
  auto grads = torch::autograd::grad({out}, wrt, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                     /*allow_unused=*/true);
  GradCheck result;
  std::mt19937_64 rng(99);
  auto set = [](torch::Tensor& flat, int64_t k, double v) {
    torch::NoGradGuard no_grad;
    flat[k] = v;
  };
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto flat = wrt[i].view(-1);
    const int64_t n = flat.numel();
    auto analytic = grads[i].defined() ? grads[i].reshape(-1) : torch::zeros_like(flat);
    std::vector<int64_t> picks;
    if (n <= per_tensor) {
      for (int64_t k = 0; k < n; ++k) picks.push_back(k);
    } else {
      std::uniform_int_distribution<int64_t> pick(0, n - 1);
      for (int k = 0; k < per_tensor; ++k) picks.push_back(pick(rng));
    }
    for (auto k : picks) {
      const double orig = flat[k].item<double>();
      set(flat, k, orig + eps);
      const double up = f().item<double>();
      set(flat, k, orig - eps);
      const double down = f().item<double>();
      set(flat, k, orig);
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[k].item<double>();
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.checked;
    }
  }
  return result;
}

std::vector<torch::Tensor> double_parameters(torch::nn::Module& module) {
  module.to(torch::kDouble);
  std::vector<torch::Tensor> params;
  for (auto& p : module.parameters()) {
    p.set_requires_grad(true);
    params.push_back(p);
  }
  return params;
}

Image pattern_image(int64_t height, int64_t width, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto y = torch::arange(height, torch::kFloat).view({1, height, 1}) / static_cast<float>(height);
  auto x = torch::arange(width, torch::kFloat).view({1, 1, width}) / static_cast<float>(width);
  auto phase = torch::tensor({0.0f, 1.3f, 2.1f}).view({3, 1, 1});
  auto img = 0.5 + 0.25 * torch::sin(9.0 * x + 5.0 * y + phase) + 0.05 * torch::rand({3, height, width}, gen);
  img.slice(1, height / 3, 2 * height / 3).slice(2, width / 3, 2 * width / 3).fill_(0.9);
  return Image(img.clamp(0, 1).contiguous());
}

TrainConfig tiny_config(int iters) {
  auto c = TrainConfig::desk();
  c.iters_per_scale = iters;
  c.blocks.base_channels = 8;
  c.blocks.num_resblocks = 1;
  c.blocks.injector_stages = 2;
  c.blocks.discriminator_layers = 3;
  c.progress_every = 1;
  c.seed = 11;
  return c;
}

TempDir::TempDir() {
  std::random_device rd;
  path_ = std::filesystem::temp_directory_path() / ("mogan_test_" + std::to_string(rd()) + std::to_string(rd()));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

RoiBox tiny_box() { return {3, 3, 37, 37}; }

const Model& tiny_trained_model() {
  static const auto model = [] {
    auto m = std::make_unique<Model>(make_model(pattern_image(40, 40), {tiny_box()}, tiny_config(3)));
    train_model(*m);
    return m;
  }();
  return *model;
}

std::filesystem::path data_dir() { return MOGAN_DATA_DIR; }

}  // namespace mogan::testing
