#include "mogan/blocks.hpp"

#include <sstream>

#include "mogan/digest.hpp"

namespace mogan {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d same_conv(int in, int out, int kernel, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2)); }

}  // namespace

void BlockConfig::validate() const {
  if (base_channels < 1) throw ValidationError("base_channels must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ValidationError("kernel_size must be odd");
  if (num_resblocks < 1) throw ValidationError("num_resblocks must be >= 1");
  if (injector_stages < 2) throw ValidationError("injector_stages must be >= 2");
  if (!(injection_damping > 0.0 && injection_damping <= 1.0)) {
    throw ValidationError("injection_damping must lie in (0,1]");
  }
  if (discriminator_layers < 2) throw ValidationError("discriminator_layers must be >= 2");
}

StyleParams StyleParams::identity(const torch::Tensor& like) {
  return StyleParams{torch::ones_like(like), torch::zeros_like(like)};
}

torch::Tensor modulate(const torch::Tensor& x, const StyleParams& style) {
  if (x.sizes() != style.weight.sizes() || x.sizes() != style.bias.sizes()) {
    std::ostringstream msg;
    msg << "style params " << style.weight.sizes() << "/" << style.bias.sizes()
        << " do not match feature map " << x.sizes();
    throw ValidationError(msg.str());
  }
  return style.weight * x + style.bias;
}

InjectorBypassImpl::InjectorBypassImpl(int channels, int stages) {
  input_ = register_module("input", same_conv(3, channels, 3, 2));
  residual_ = register_module("residual", nn::ModuleList());
  for (int i = 0; i < stages - 2; ++i) {
    residual_->push_back(same_conv(channels, channels, 3));
  }
  output_ = register_module("output", same_conv(channels, channels, 3));
}

torch::Tensor InjectorBypassImpl::forward(const torch::Tensor& image) {
  auto h = lrelu(input_->forward(image));
  for (const auto& stage : *residual_) {
    h = h + stage->as<nn::Conv2d>()->forward(lrelu(h));
  }
  return output_->forward(lrelu(h));
}

StyleInjectorImpl::StyleInjectorImpl(int channels, int stages, double damping)
    : channels_(channels), damping_(damping) {
  weight_ = register_module("weight_path", InjectorBypass(channels, stages));
  bias_ = register_module("bias_path", InjectorBypass(channels, stages));
}

StyleParams StyleInjectorImpl::forward(const torch::Tensor& aug_image, torch::IntArrayRef target) {
  if (target.size() != 4 || target[1] != channels_) {
    std::ostringstream msg;
    msg << "injector with " << channels_ << " channels cannot target shape " << target;
    throw ValidationError(msg.str());
  }
  auto fit = [&](const torch::Tensor& t) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{target[2], target[3]})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto raw_w = fit(weight_->forward(aug_image));
  auto raw_b = fit(bias_->forward(aug_image));
  StyleParams out{1.0 + damping_ * raw_w, damping_ * raw_b};
  if (out.weight.sizes() != target) {
    throw ValidationError("style params do not match target after resize");
  }
  return out;
}

DeformConv2dImpl::DeformConv2dImpl(int in_channels, int out_channels, int kernel_size)
    : kernel_(kernel_size) {
  offset_conv_ = register_module("offset", same_conv(in_channels, 2 * kernel_size * kernel_size, kernel_size));
  weight_ = register_parameter(
      "weight", torch::empty({out_channels, in_channels, kernel_size, kernel_size}));
  bias_ = register_parameter("bias", torch::zeros({out_channels}));
  nn::init::kaiming_uniform_(weight_, std::sqrt(5.0));
  nn::init::zeros_(offset_conv_->weight);
  nn::init::zeros_(offset_conv_->bias);
}

torch::Tensor DeformConv2dImpl::forward(const torch::Tensor& x) {
  return forward_with_offsets(x, offset_conv_->forward(x));
}

torch::Tensor bilinear_gather(const torch::Tensor& x, const torch::Tensor& py, const torch::Tensor& px) {
  const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const auto out_shape = py.sizes();
  auto y0 = py.floor();
  auto x0 = px.floor();
  auto ly = py - y0;
  auto lx = px - x0;
  auto flat = x.reshape({b, c, h * w});
  torch::Tensor acc;
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      auto yc = y0 + dy;
      auto xc = x0 + dx;
      auto valid = ((yc >= 0) & (yc <= h - 1) & (xc >= 0) & (xc <= w - 1)).to(x.scalar_type());
      auto wy = dy == 0 ? 1 - ly : ly;
      auto wx = dx == 0 ? 1 - lx : lx;
      auto weight = (wy * wx * valid).unsqueeze(1);
      // NaN coordinates keep a NaN weight but must still index in range.
      auto idx = (torch::nan_to_num(yc, 0, 0, 0).clamp(0, h - 1) * w + torch::nan_to_num(xc, 0, 0, 0).clamp(0, w - 1))
                     .to(torch::kLong);
      auto gathered = flat.gather(2, idx.reshape({b, 1, -1}).expand({b, c, idx.numel() / b}));
      std::vector<int64_t> shape{b, c};
      shape.insert(shape.end(), out_shape.begin() + 1, out_shape.end());
      auto term = gathered.reshape(shape) * weight;
      acc = acc.defined() ? acc + term : term;
    }
  }
  return acc;
}

torch::Tensor DeformConv2dImpl::forward_with_offsets(const torch::Tensor& x, const torch::Tensor& offsets) {
  const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const int64_t taps = static_cast<int64_t>(kernel_) * kernel_;
  if (offsets.dim() != 4 || offsets.size(0) != b || offsets.size(1) != 2 * taps ||
      offsets.size(2) != h || offsets.size(3) != w) {
    std::ostringstream msg;
    msg << "offsets " << offsets.sizes() << " do not match input " << x.sizes();
    throw ValidationError(msg.str());
  }
  if (c != weight_.size(1)) {
    throw ValidationError("deformable conv input channel mismatch");
  }
  const int pad = kernel_ / 2;
  auto opts = x.options();
  auto grid_y = torch::arange(h, opts).view({1, 1, h, 1});
  auto grid_x = torch::arange(w, opts).view({1, 1, 1, w});
  auto tap = torch::arange(taps, opts.dtype(torch::kLong));
  auto tap_y = (torch::div(tap, kernel_, "floor") - pad).to(x.scalar_type()).view({1, taps, 1, 1});
  auto tap_x = (torch::remainder(tap, kernel_) - pad).to(x.scalar_type()).view({1, taps, 1, 1});
  auto pairs = offsets.view({b, taps, 2, h, w});
  auto py = grid_y + tap_y + pairs.select(2, 0);
  auto px = grid_x + tap_x + pairs.select(2, 1);

  auto sampled = bilinear_gather(x, py, px);  // B x C x K^2 x H x W
  auto cols = sampled.reshape({b, c * taps, h * w});
  auto out = weight_.reshape({weight_.size(0), c * taps}).matmul(cols);
  return (out + bias_.view({1, -1, 1})).view({b, weight_.size(0), h, w});
}

GatedConv2dImpl::GatedConv2dImpl(int in_channels, int out_channels, int kernel_size) {
  feature_ = register_module("feature", same_conv(in_channels, out_channels, kernel_size));
  gate_ = register_module("gate", same_conv(in_channels, out_channels, kernel_size));
}

torch::Tensor GatedConv2dImpl::forward(const torch::Tensor& x) {
  return feature_->forward(x) * torch::sigmoid(gate_->forward(x));
}

ChannelAttentionImpl::ChannelAttentionImpl(int kernel_size) {
  conv_ = register_module(
      "conv", nn::Conv1d(nn::Conv1dOptions(1, 1, kernel_size).padding(kernel_size / 2).bias(true)));
}

torch::Tensor ChannelAttentionImpl::gates(const torch::Tensor& x) {
  auto pooled = x.mean({2, 3}).unsqueeze(1);  // B x 1 x C
  return torch::sigmoid(conv_->forward(pooled)).view({x.size(0), x.size(1), 1, 1});
}

torch::Tensor ChannelAttentionImpl::forward(const torch::Tensor& x) { return x * gates(x); }

RoiResBlockImpl::RoiResBlockImpl(const BlockConfig& config) {
  const int ch = config.base_channels;
  const int k = config.kernel_size;
  auto bn = [ch] { return nn::BatchNorm2d(nn::BatchNorm2dOptions(ch).track_running_stats(false)); };
  norm1_ = register_module("norm1", bn());
  conv1_ = register_module("conv1", same_conv(ch, ch, k));
  norm2_ = register_module("norm2", bn());
  if (config.deform_enabled) {
    deform2_ = register_module("deform2", DeformConv2d(ch, ch, k));
  } else {
    conv2_ = register_module("conv2", same_conv(ch, ch, k));
  }
  if (config.attention_enabled) {
    attention_ = register_module("attention", ChannelAttention(3));
  }
}

torch::Tensor RoiResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1_->forward(lrelu(norm1_->forward(x)));
  h = lrelu(norm2_->forward(h));
  h = deform2_ ? deform2_->forward(h) : conv2_->forward(h);
  if (attention_) {
    h = attention_->forward(h);
  }
  return x + h;
}

std::vector<std::string> RoiResBlockImpl::layer_kinds() const {
  std::vector<std::string> kinds{"batchnorm", "leaky_relu", "conv", "batchnorm", "leaky_relu"};
  kinds.push_back(deform2_ ? "deformable_conv" : "conv");
  if (attention_) kinds.push_back("channel_attention");
  kinds.push_back("skip");
  return kinds;
}

BackgroundResBlockImpl::BackgroundResBlockImpl(const BlockConfig& config) {
  const int ch = config.base_channels;
  const int k = config.kernel_size;
  auto in = [ch] {
    return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch).affine(true).track_running_stats(false));
  };
  norm1_ = register_module("norm1", in());
  norm2_ = register_module("norm2", in());
  if (config.gated_enabled) {
    gated1_ = register_module("gated1", GatedConv2d(ch, ch, k));
    gated2_ = register_module("gated2", GatedConv2d(ch, ch, k));
  } else {
    conv1_ = register_module("conv1", same_conv(ch, ch, k));
    conv2_ = register_module("conv2", same_conv(ch, ch, k));
  }
}

torch::Tensor BackgroundResBlockImpl::forward(const torch::Tensor& x) {
  auto h = F::elu(norm1_->forward(x));
  h = gated1_ ? gated1_->forward(h) : conv1_->forward(h);
  h = F::elu(norm2_->forward(h));
  h = gated2_ ? gated2_->forward(h) : conv2_->forward(h);
  return x + h;
}

std::vector<std::string> BackgroundResBlockImpl::layer_kinds() const {
  const std::string conv = gated1_ ? "gated_conv" : "conv";
  return {"instancenorm", "elu", conv, "instancenorm", "elu", conv, "skip"};
}

MarkovianDiscriminatorImpl::MarkovianDiscriminatorImpl(const BlockConfig& config) {
  const int ch = config.base_channels;
  const int layers = config.discriminator_layers;
  convs_ = register_module("convs", nn::ModuleList());
  for (int i = 0; i < layers; ++i) {
    const int in = i == 0 ? 3 : ch;
    const int out = i == layers - 1 ? 1 : ch;
    convs_->push_back(same_conv(in, out, 3));
  }
  receptive_field_ = 1 + 2 * layers;
}

torch::Tensor MarkovianDiscriminatorImpl::forward(const torch::Tensor& x) {
  if (x.size(2) < receptive_field_ || x.size(3) < receptive_field_) {
    std::ostringstream msg;
    msg << "discriminator input " << x.size(3) << "x" << x.size(2)
        << " is smaller than its receptive field " << receptive_field_;
    throw ValidationError(msg.str());
  }
  auto h = x;
  const auto n = convs_->size();
  for (std::size_t i = 0; i < n; ++i) {
    h = convs_[i]->as<nn::Conv2d>()->forward(h);
    if (i + 1 < n) h = lrelu(h);
  }
  return h;
}

torch::Tensor MarkovianDiscriminatorImpl::score(const torch::Tensor& x) { return forward(x).mean(); }

void init_weights(nn::Module& module, torch::Generator& generator) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(/*include_self=*/true)) {
    if (auto* conv = m->as<nn::Conv2dImpl>()) {
      conv->weight.normal_(0.0, 0.02, generator);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* conv1 = m->as<nn::Conv1dImpl>()) {
      conv1->weight.normal_(0.0, 0.02, generator);
      if (conv1->bias.defined()) conv1->bias.zero_();
    } else if (auto* bn = m->as<nn::BatchNorm2dImpl>()) {
      bn->weight.normal_(1.0, 0.02, generator);
      bn->bias.zero_();
    } else if (auto* inorm = m->as<nn::InstanceNorm2dImpl>()) {
      inorm->weight.normal_(1.0, 0.02, generator);
      inorm->bias.zero_();
    } else if (auto* deform = m->as<DeformConv2dImpl>()) {
      deform->weight().normal_(0.0, 0.02, generator);
      deform->bias().zero_();
    }
  }
  // Offset predictors start at zero so deformable layers begin as plain convs.
  for (auto& m : module.modules(true)) {
    if (auto* deform = m->as<DeformConv2dImpl>()) {
      deform->offset_conv()->weight.zero_();
      deform->offset_conv()->bias.zero_();
    }
  }
}

std::string parameter_digest(const nn::Module& module) {
  Sha256 h;
  for (const auto& item : module.named_parameters(true)) {
    h.update(item.key());
    auto t = item.value().detach().to(torch::kFloat32).contiguous();
    h.update(t.data_ptr(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  return h.hex();
}

}  // namespace mogan
