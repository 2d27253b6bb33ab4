#include "mogan/generators.hpp"

#include <sstream>

#include "mogan/digest.hpp"

namespace mogan {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string_view to_string(BranchKind kind) {
  return kind == BranchKind::roi ? "roi" : "background";
}

GeneratorImpl::GeneratorImpl(BranchKind kind, const BlockConfig& config) : kind_(kind) {
  config.validate();
  const int ch = config.base_channels;
  const int k = config.kernel_size;
  const auto conv = [k](int in, int out) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, k).padding(k / 2));
  };
  const bool gated = kind == BranchKind::background && config.gated_enabled;

  if (gated) {
    head_gated_ = register_module("head", GatedConv2d(3, ch, k));
  } else {
    head_conv_ = register_module("head", conv(3, ch));
  }

  injectors_ = register_module("injectors", nn::ModuleList());
  blocks_ = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < config.num_resblocks; ++i) {
    if (kind == BranchKind::roi) {
      if (config.injector_enabled) {
        injectors_->push_back(StyleInjector(ch, config.injector_stages, config.injection_damping));
      }
      blocks_->push_back(RoiResBlock(config));
    } else {
      blocks_->push_back(BackgroundResBlock(config));
    }
  }

  if (kind == BranchKind::roi) {
    tail_bn_ = register_module("tail_norm", nn::BatchNorm2d(nn::BatchNorm2dOptions(ch).track_running_stats(false)));
  } else {
    tail_in_ = register_module(
        "tail_norm", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch).affine(true).track_running_stats(false)));
  }
  if (gated) {
    tail_gated_ = register_module("tail", GatedConv2d(ch, 3, k));
  } else {
    tail_conv_ = register_module("tail", conv(ch, 3));
  }
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& input, const torch::Tensor& previous,
                                     const torch::Tensor& style_image) {
  auto h = head_gated_ ? head_gated_->forward(input) : head_conv_->forward(input);
  const bool inject = has_injectors();
  if (inject && !style_image.defined()) {
    throw ValidationError("generator with style injectors needs a style image");
  }
  for (std::size_t i = 0; i < blocks_->size(); ++i) {
    if (inject) {
      auto style = injectors_[i]->as<StyleInjectorImpl>()->forward(style_image, h.sizes());
      h = modulate(h, style);
    }
    if (kind_ == BranchKind::roi) {
      h = blocks_->ptr(i)->as<RoiResBlockImpl>()->forward(h);
    } else {
      h = blocks_->ptr(i)->as<BackgroundResBlockImpl>()->forward(h);
    }
  }
  if (tail_bn_) {
    h = F::leaky_relu(tail_bn_->forward(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  } else {
    h = F::elu(tail_in_->forward(h));
  }
  h = tail_gated_ ? tail_gated_->forward(h) : tail_conv_->forward(h);
  return torch::tanh(h) + previous;
}

std::vector<std::string> GeneratorImpl::architecture() const {
  std::vector<std::string> arch;
  arch.emplace_back(head_gated_ ? "gated_conv" : "conv");
  for (std::size_t i = 0; i < blocks_->size(); ++i) {
    if (has_injectors()) arch.emplace_back("style_injector");
    std::vector<std::string> inner;
    if (kind_ == BranchKind::roi) {
      inner = blocks_->ptr(i)->as<RoiResBlockImpl>()->layer_kinds();
    } else {
      inner = blocks_->ptr(i)->as<BackgroundResBlockImpl>()->layer_kinds();
    }
    std::string desc = "resblock[";
    for (std::size_t j = 0; j < inner.size(); ++j) {
      desc += (j ? "," : "") + inner[j];
    }
    arch.push_back(desc + "]");
  }
  arch.emplace_back(tail_bn_ ? "batchnorm" : "instancenorm");
  arch.emplace_back(tail_bn_ ? "leaky_relu" : "elu");
  arch.emplace_back(tail_gated_ ? "gated_conv" : "conv");
  arch.emplace_back("tanh");
  arch.emplace_back("residual_add");
  return arch;
}

void ScaleModel::freeze() {
  for (auto& p : generator->parameters()) p.set_requires_grad(false);
  for (auto& p : discriminator->parameters()) p.set_requires_grad(false);
  frozen = true;
}

std::string ScaleModel::digest() const {
  Sha256 h;
  h.update(parameter_digest(*generator));
  h.update(parameter_digest(*discriminator));
  return h.hex();
}

bool BranchStack::fully_trained() const {
  for (const auto& s : scales) {
    if (!s.trained) return false;
  }
  return !scales.empty();
}

bool BranchStack::fully_frozen() const {
  for (const auto& s : scales) {
    if (!s.frozen) return false;
  }
  return !scales.empty();
}

torch::Tensor BranchStack::target(int n) const { return pyramid.at(n).batched(); }

torch::Tensor BranchStack::mask(int n) const {
  if (kind == BranchKind::roi) return {};
  return masks.at(n);
}

std::string BranchStack::digest() const {
  Sha256 h;
  for (const auto& s : scales) h.update(s.digest());
  return h.hex();
}

namespace {

void build_scales(BranchStack& stack) {
  stack.scales.clear();
  for (int n = 0; n <= stack.coarsest(); ++n) {
    ScaleModel m;
    m.scale = n;
    m.generator = Generator(stack.kind, stack.blocks);
    m.discriminator = MarkovianDiscriminator(stack.blocks);
    stack.scales.push_back(std::move(m));
  }
}

}  // namespace

void initialise_stack(BranchStack& stack) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(stack.seed);
  stack.anchor.clear();
  for (int n = 0; n <= stack.coarsest(); ++n) {
    const auto h = stack.pyramid[n].height();
    const auto w = stack.pyramid[n].width();
    stack.anchor.push_back(torch::zeros({1, 3, h, w}));
  }
  const int top = stack.coarsest();
  stack.anchor[top] =
      torch::randn({1, 1, stack.pyramid[top].height(), stack.pyramid[top].width()}, gen)
          .expand({1, 3, -1, -1})
          .contiguous();
  for (auto& s : stack.scales) {
    init_weights(*s.generator, gen);
    init_weights(*s.discriminator, gen);
  }
}

BranchStack make_roi_stack(const Image& roi_image, const RoiBox& box, const PyramidSpec& spec,
                           const BlockConfig& config, uint64_t seed) {
  BranchStack stack;
  stack.kind = BranchKind::roi;
  stack.blocks = config;
  stack.pyramid = build_pyramid(roi_image, spec);
  stack.box = box;
  stack.seed = seed;
  build_scales(stack);
  initialise_stack(stack);
  return stack;
}

BranchStack make_background_stack(const Image& image, const std::vector<RoiBox>& boxes,
                                  const PyramidSpec& spec, const BlockConfig& config, uint64_t seed) {
  validate_boxes(boxes, image.width(), image.height());
  BranchStack stack;
  stack.kind = BranchKind::background;
  stack.blocks = config;
  stack.seed = seed;
  const auto levels = build_pyramid(image, spec);
  for (std::size_t n = 0; n < levels.size(); ++n) {
    const double factor = std::pow(spec.rescale_factor, -static_cast<double>(n));
    std::vector<RoiBox> scaled;
    for (const auto& b : boxes) {
      scaled.push_back(rescale_box(b, factor, levels[n].width(), levels[n].height()));
    }
    auto masked = n == 0 ? mask_background(levels[n], boxes) : mask_background(levels[n], scaled);
    stack.pyramid.push_back(masked.image);
    stack.masks.push_back(masked.mask.unsqueeze(0));
  }
  build_scales(stack);
  initialise_stack(stack);
  return stack;
}

NoiseSource seeded_noise(const BranchStack& stack, const NoiseSpec& spec) {
  auto gen = std::make_shared<at::Generator>(at::make_generator<at::CPUGeneratorImpl>(spec.seed));
  const int top = stack.coarsest();
  return [&stack, spec, gen, top](int n) {
    const auto h = stack.pyramid[n].height();
    const auto w = stack.pyramid[n].width();
    const double amp = spec.amplitudes.empty() ? stack.scales[n].noise_amp : spec.amplitudes.at(n);
    if (spec.zero) return torch::zeros({1, 3, h, w});
    auto z = n == top ? torch::randn({1, 1, h, w}, *gen).expand({1, 3, h, w}).contiguous()
                      : torch::randn({1, 3, h, w}, *gen);
    return z * amp;
  };
}

NoiseSource anchor_noise(const BranchStack& stack) {
  return [&stack](int n) { return stack.anchor.at(n) * stack.scales.at(n).noise_amp; };
}

StyleSource augmented_style(const BranchStack& stack, const AugmentDescriptor& desc,
                            const AugmentMagnitudes& magnitudes) {
  return [&stack, desc, magnitudes](int n) -> torch::Tensor {
    if (stack.kind != BranchKind::roi) return {};
    return apply(stack.pyramid[n], desc, magnitudes).batched();
  };
}

torch::Tensor run_stack(const BranchStack& stack, int stop_scale, const NoiseSource& noise,
                        const StyleSource& style, bool require_trained) {
  const int top = stack.coarsest();
  if (stop_scale < 0 || stop_scale > top) {
    std::ostringstream msg;
    msg << "stop scale " << stop_scale << " outside [0," << top << "]";
    throw ValidationError(msg.str());
  }
  torch::Tensor out;
  for (int n = top; n >= stop_scale; --n) {
    const auto& model = stack.scales[n];
    if (require_trained && !model.trained) {
      std::ostringstream msg;
      msg << to_string(stack.kind) << " scale " << n << " is untrained";
      throw StateError(msg.str());
    }
    const auto h = stack.pyramid[n].height();
    const auto w = stack.pyramid[n].width();
    auto previous = n == top ? torch::zeros({1, 3, h, w}) : resize_tensor(out, h, w);
    auto z = noise(n);
    auto s = style ? style(n) : torch::Tensor{};
    auto generator = model.generator;
    out = generator->forward(z + previous, previous, s);
  }
  return out;
}

Image roi_generate(const BranchStack& stack, const NoiseSpec& noise, const AugmentDescriptor& aug,
                   int stop_scale, const AugmentMagnitudes& magnitudes) {
  if (stack.kind != BranchKind::roi) throw ValidationError("roi_generate needs an roi stack");
  torch::NoGradGuard no_grad;
  return Image::from_unclamped(
      run_stack(stack, stop_scale, seeded_noise(stack, noise), augmented_style(stack, aug, magnitudes)));
}

Image background_generate(const BranchStack& stack, const NoiseSpec& noise, int stop_scale) {
  if (stack.kind != BranchKind::background) {
    throw ValidationError("background_generate needs a background stack");
  }
  torch::NoGradGuard no_grad;
  return Image::from_unclamped(run_stack(stack, stop_scale, seeded_noise(stack, noise), {}));
}

Image inject_edit(const BranchStack& stack, const Image& edited_roi, const NoiseSpec& noise,
                  int min_edit_scale) {
  if (stack.kind != BranchKind::roi) throw ValidationError("editing needs an roi stack");
  if (!stack.fully_frozen()) throw StateError("editing requires every scale to be frozen");
  torch::NoGradGuard no_grad;
  StyleSource style = [&](int n) {
    const auto& level = stack.pyramid[n];
    if (n < min_edit_scale) return level.batched();
    return resize(edited_roi, level.height(), level.width()).batched();
  };
  return Image::from_unclamped(run_stack(stack, 0, seeded_noise(stack, noise), style));
}

}  // namespace mogan
