#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mogan/imaging.hpp"
#include "mogan/trainer.hpp"

namespace mogan::testing {

struct GradCheck {
  double max_rel_error = 0;
  int checked = 0;
};

/// Central differences of the scalar `f` against autograd for up to
/// `per_tensor` entries of every tensor in `wrt` (double tensors with
/// requires_grad). Relative error is |a - n| / max(|a|, |n|, floor), so gradients
/// below `floor` (e.g. biases feeding a normalisation) are compared absolutely.
GradCheck grad_check(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& wrt,
                     int per_tensor = 16, double eps = 1e-6, double floor = 1e-5);

/// Double-precision copies of every parameter of `module` with gradients on.
std::vector<torch::Tensor> double_parameters(torch::nn::Module& module);

/// Deterministic smooth RGB test pattern with a bright square.
Image pattern_image(int64_t height, int64_t width, uint64_t seed = 0);

/// Small networks and few iterations; the whole model trains in seconds.
TrainConfig tiny_config(int iters = 2);

/// Fresh temporary directory removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// A tiny trained model on a 40x40 pattern with one 34x34 box, trained once per process.
const Model& tiny_trained_model();
RoiBox tiny_box();

std::filesystem::path data_dir();

}  // namespace mogan::testing
