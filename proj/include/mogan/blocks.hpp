#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mogan/error.hpp"

namespace mogan {

struct BlockConfig {
  int base_channels = 32;
  int kernel_size = 3;
  int num_resblocks = 3;
  bool attention_enabled = true;
  bool deform_enabled = true;
  bool gated_enabled = true;
  bool injector_enabled = true;
  /// Conv stages in each style-injector bypass.
  int injector_stages = 3;
  /// Damping c in (0,1]: modulation uses 1 + c(w - 1) and c*b.
  double injection_damping = 1.0;
  int discriminator_layers = 5;

  void validate() const;
};

/// Affine modulation maps, both 1xCxHxW.
struct StyleParams {
  torch::Tensor weight;
  torch::Tensor bias;

  /// w = 1, b = 0 for a feature map of the given shape.
  static StyleParams identity(const torch::Tensor& like);
};

/// w * x + b, shapes must match exactly.
torch::Tensor modulate(const torch::Tensor& x, const StyleParams& style);

/// Strided conv encoder with one residual stage; one instance per output (w or b).
class InjectorBypassImpl : public torch::nn::Module {
 public:
  InjectorBypassImpl(int channels, int stages);
  torch::Tensor forward(const torch::Tensor& image);

  torch::nn::Conv2d& output_conv() { return output_; }

 private:
  torch::nn::Conv2d input_{nullptr};
  torch::nn::ModuleList residual_;
  torch::nn::Conv2d output_{nullptr};
};
TORCH_MODULE(InjectorBypass);

/// Encodes an augmented image into spatial (w, b) maps for one residual block.
class StyleInjectorImpl : public torch::nn::Module {
 public:
  StyleInjectorImpl(int channels, int stages, double damping = 1.0);

  /// `aug_image` is 1x3xH'xW'; outputs are resized to `target` (1xCxHxW).
  StyleParams forward(const torch::Tensor& aug_image, torch::IntArrayRef target);

  InjectorBypass& weight_path() { return weight_; }
  InjectorBypass& bias_path() { return bias_; }

 private:
  int channels_;
  double damping_;
  InjectorBypass weight_{nullptr};
  InjectorBypass bias_{nullptr};
};
TORCH_MODULE(StyleInjector);

/// 3x3 (or KxK) deformable convolution, stride 1, "same" padding. A plain conv
/// predicts 2K^2 offsets per position laid out as (dy, dx) pairs per kernel tap.
class DeformConv2dImpl : public torch::nn::Module {
 public:
  DeformConv2dImpl(int in_channels, int out_channels, int kernel_size);

  torch::Tensor forward(const torch::Tensor& x);
  /// Main convolution at explicit offsets (1x2K^2xHxW).
  torch::Tensor forward_with_offsets(const torch::Tensor& x, const torch::Tensor& offsets);

  torch::nn::Conv2d& offset_conv() { return offset_conv_; }
  torch::Tensor& weight() { return weight_; }
  torch::Tensor& bias() { return bias_; }
  int kernel_size() const { return kernel_; }

 private:
  int kernel_;
  torch::nn::Conv2d offset_conv_{nullptr};
  torch::Tensor weight_;
  torch::Tensor bias_;
};
TORCH_MODULE(DeformConv2d);

/// Bilinear sample of x (BxCxHxW) at fractional (py, px) positions
/// (BxKxHoxWo each); out-of-image corners contribute zero. Returns BxCxKxHoxWo.
torch::Tensor bilinear_gather(const torch::Tensor& x, const torch::Tensor& py, const torch::Tensor& px);

/// feature(x) * sigmoid(gate(x)).
class GatedConv2dImpl : public torch::nn::Module {
 public:
  GatedConv2dImpl(int in_channels, int out_channels, int kernel_size);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d& feature() { return feature_; }
  torch::nn::Conv2d& gate() { return gate_; }

 private:
  torch::nn::Conv2d feature_{nullptr};
  torch::nn::Conv2d gate_{nullptr};
};
TORCH_MODULE(GatedConv2d);

/// Efficient channel attention: global average pool, 1-D conv across
/// channels, sigmoid, per-channel rescale.
class ChannelAttentionImpl : public torch::nn::Module {
 public:
  explicit ChannelAttentionImpl(int kernel_size = 3);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor gates(const torch::Tensor& x);

  torch::nn::Conv1d& conv() { return conv_; }

 private:
  torch::nn::Conv1d conv_{nullptr};
};
TORCH_MODULE(ChannelAttention);

/// ROI residual block:
///   x + [attention](deform(lrelu(bn(conv(lrelu(bn(x)))))))
class RoiResBlockImpl : public torch::nn::Module {
 public:
  explicit RoiResBlockImpl(const BlockConfig& config);
  torch::Tensor forward(const torch::Tensor& x);
  std::vector<std::string> layer_kinds() const;

 private:
  torch::nn::BatchNorm2d norm1_{nullptr};
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::BatchNorm2d norm2_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
  DeformConv2d deform2_{nullptr};
  ChannelAttention attention_{nullptr};
};
TORCH_MODULE(RoiResBlock);

/// Background residual block: two InstanceNorm-ELU-gated-conv stages plus skip.
class BackgroundResBlockImpl : public torch::nn::Module {
 public:
  explicit BackgroundResBlockImpl(const BlockConfig& config);
  torch::Tensor forward(const torch::Tensor& x);
  std::vector<std::string> layer_kinds() const;

 private:
  torch::nn::InstanceNorm2d norm1_{nullptr};
  torch::nn::InstanceNorm2d norm2_{nullptr};
  GatedConv2d gated1_{nullptr};
  GatedConv2d gated2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(BackgroundResBlock);

/// Fully-convolutional patch critic: `layers` 3x3 convs, stride 1, zero pad 1,
/// LeakyReLU(0.2) between, single-channel score map of the input's size.
class MarkovianDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit MarkovianDiscriminatorImpl(const BlockConfig& config);
  torch::Tensor forward(const torch::Tensor& x);
  /// Scalar score: spatial mean of the map.
  torch::Tensor score(const torch::Tensor& x);
  int receptive_field() const { return receptive_field_; }

 private:
  torch::nn::ModuleList convs_;
  int receptive_field_;
};
TORCH_MODULE(MarkovianDiscriminator);

/// N(0, 0.02) conv weights, zero biases, N(1, 0.02) norm scales, zero deform
/// offsets, all drawn from `generator`.
void init_weights(torch::nn::Module& module, torch::Generator& generator);

/// SHA-256 over every parameter's bytes in registration order.
std::string parameter_digest(const torch::nn::Module& module);

}  // namespace mogan
