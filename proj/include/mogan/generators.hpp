#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mogan/augment.hpp"
#include "mogan/blocks.hpp"
#include "mogan/imaging.hpp"

namespace mogan {

enum class BranchKind { roi, background };

std::string_view to_string(BranchKind kind);

/// Fully-convolutional generator for one scale. ROI generators carry one style
/// injector in front of every residual block; background generators use gated
/// convolutions throughout and have no injectors.
class GeneratorImpl : public torch::nn::Module {
 public:
  GeneratorImpl(BranchKind kind, const BlockConfig& config);

  /// `input` is noise (+ upsampled previous output), `previous` is the
  /// upsampled previous output (zeros at the coarsest scale). `style_image` is
  /// the augmented training image at this scale; ignored when there are no
  /// injectors. Returns tanh(net(input)) + previous.
  torch::Tensor forward(const torch::Tensor& input, const torch::Tensor& previous,
                        const torch::Tensor& style_image = {});

  BranchKind kind() const { return kind_; }
  bool has_injectors() const { return !injectors_.is_empty() && injectors_->size() > 0; }
  torch::nn::ModuleList& injectors() { return injectors_; }

  /// Flat description of the forward math, e.g. {"conv", "style_injector", "resblock[...]", ...}.
  std::vector<std::string> architecture() const;

 private:
  BranchKind kind_;
  torch::nn::Conv2d head_conv_{nullptr};
  GatedConv2d head_gated_{nullptr};
  torch::nn::ModuleList injectors_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::BatchNorm2d tail_bn_{nullptr};
  torch::nn::InstanceNorm2d tail_in_{nullptr};
  torch::nn::Conv2d tail_conv_{nullptr};
  GatedConv2d tail_gated_{nullptr};
};
TORCH_MODULE(Generator);

struct ScaleModel {
  int scale = 0;
  Generator generator{nullptr};
  MarkovianDiscriminator discriminator{nullptr};
  bool trained = false;
  bool frozen = false;
  double noise_amp = 1.0;

  /// Stops gradient flow into every parameter; irreversible.
  void freeze();
  std::string digest() const;
};

/// One branch of the model: a pyramid of targets and one GAN per level.
/// Index n runs from 0 (finest) to coarsest() (N).
struct BranchStack {
  BranchKind kind = BranchKind::roi;
  BlockConfig blocks;
  std::vector<Image> pyramid;
  /// Background branch only: 1x1xHxW visibility mask per level.
  std::vector<torch::Tensor> masks;
  std::vector<ScaleModel> scales;
  /// Reconstruction anchor z* per level (random at N, zeros elsewhere).
  std::vector<torch::Tensor> anchor;
  /// ROI branch: location of this branch's crop in the source image.
  RoiBox box;
  uint64_t seed = 0;

  int coarsest() const { return static_cast<int>(pyramid.size()) - 1; }
  bool fully_trained() const;
  bool fully_frozen() const;
  /// Target as a 1x3xHxW tensor (masked for the background branch).
  torch::Tensor target(int n) const;
  /// 1x1xHxW mask or an undefined tensor for ROI stacks.
  torch::Tensor mask(int n) const;
  std::string digest() const;
};

BranchStack make_roi_stack(const Image& roi_image, const RoiBox& box, const PyramidSpec& spec,
                           const BlockConfig& config, uint64_t seed);
BranchStack make_background_stack(const Image& image, const std::vector<RoiBox>& boxes,
                                  const PyramidSpec& spec, const BlockConfig& config, uint64_t seed);

/// Draws reconstruction anchors and initial weights from the stack seed.
void initialise_stack(BranchStack& stack);

struct NoiseSpec {
  uint64_t seed = 0;
  /// Replaces every draw with zeros.
  bool zero = false;
  /// Optional per-level override of the stack's noise amplitudes (index n).
  std::vector<double> amplitudes;
};

/// Per-scale noise tensor (1x3xHxW), already amplitude-scaled.
using NoiseSource = std::function<torch::Tensor(int scale)>;
/// Per-scale style image (1x3xHxW) or an undefined tensor.
using StyleSource = std::function<torch::Tensor(int scale)>;

/// Seeded i.i.d. Gaussian noise walking coarse to fine: one channel broadcast
/// to RGB at the coarsest level, per-channel elsewhere.
NoiseSource seeded_noise(const BranchStack& stack, const NoiseSpec& spec);
NoiseSource anchor_noise(const BranchStack& stack);

/// Styles from augmenting each pyramid level with `desc`.
StyleSource augmented_style(const BranchStack& stack, const AugmentDescriptor& desc,
                            const AugmentMagnitudes& magnitudes = {});

/// Core recursion from the coarsest level down to `stop_scale`. Calls noise
/// then style for each level in that order. Returns the unclamped 1x3xHxW output.
torch::Tensor run_stack(const BranchStack& stack, int stop_scale, const NoiseSource& noise,
                        const StyleSource& style, bool require_trained = true);

Image roi_generate(const BranchStack& stack, const NoiseSpec& noise, const AugmentDescriptor& aug,
                   int stop_scale = 0, const AugmentMagnitudes& magnitudes = {});

Image background_generate(const BranchStack& stack, const NoiseSpec& noise, int stop_scale = 0);

/// Generation with the injector input replaced by `edited_roi` (resized to
/// each level) at every level n >= min_edit_scale. Requires a frozen stack.
Image inject_edit(const BranchStack& stack, const Image& edited_roi, const NoiseSpec& noise,
                  int min_edit_scale = 0);

}  // namespace mogan
