#include "mogan/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "mogan/digest.hpp"

namespace mogan {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

AblationFlags AblationFlags::preset(std::string_view name) {
  AblationFlags f;
  if (name == "full") return f;
  if (name == "minus_deformable") {
    f.disable_deformable = true;
  } else if (name == "minus_attention") {
    f.disable_channel_attention = true;
  } else if (name == "minus_injector") {
    f.disable_style_injector = true;
  } else if (name == "baseline") {
    f.disable_deformable = f.disable_channel_attention = f.disable_style_injector = f.disable_gated_conv = true;
  } else {
    throw ValidationError("unknown ablation preset: " + std::string(name));
  }
  return f;
}

std::vector<std::string> AblationFlags::preset_names() {
  return {"baseline", "minus_deformable", "minus_attention", "minus_injector", "full"};
}

BlockConfig AblationFlags::apply(BlockConfig config) const {
  config.deform_enabled = config.deform_enabled && !disable_deformable;
  config.attention_enabled = config.attention_enabled && !disable_channel_attention;
  config.injector_enabled = config.injector_enabled && !disable_style_injector;
  config.gated_enabled = config.gated_enabled && !disable_gated_conv;
  return config;
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.iters_per_scale = 200;
  return c;
}

TrainConfig TrainConfig::profile(std::string_view name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  throw ValidationError("unknown profile: " + std::string(name));
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ValidationError("lr must be > 0");
  if (iters_per_scale < 1) throw ValidationError("iters_per_scale must be >= 1");
  if (d_steps < 0 || g_steps < 0) throw ValidationError("d_steps and g_steps must be >= 0");
  if (augment_kinds.empty()) throw ValidationError("augment kinds must not be empty");
  if (progress_every < 1) throw ValidationError("progress_every must be >= 1");
  if (coarse_noise_amp < 0 || noise_amp_scale < 0) throw ValidationError("noise amplitudes must be >= 0");
  LossWeights{weights.alpha, weights.beta_coarse, weights.lambda_gp}.validate();
  LossWeights{weights.alpha, weights.beta_fine, weights.lambda_gp}.validate();
  LossWeights{weights.alpha, weights.beta_background, weights.lambda_gp}.validate();
  blocks.validate();
  if (pyramid.rescale_factor <= 1.0) throw ValidationError("rescale_factor must be > 1");
}

void to_json(json& j, const TrainConfig& c) {
  json kinds = json::array();
  for (auto k : c.augment_kinds) kinds.push_back(std::string(to_string(k)));
  j = json{
      {"lr", c.lr},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"iters_per_scale", c.iters_per_scale},
      {"d_steps", c.d_steps},
      {"g_steps", c.g_steps},
      {"weights",
       {{"alpha", c.weights.alpha},
        {"beta_coarse", c.weights.beta_coarse},
        {"beta_fine", c.weights.beta_fine},
        {"beta_background", c.weights.beta_background},
        {"lambda_gp", c.weights.lambda_gp}}},
      {"ablation",
       {{"disable_deformable", c.ablation.disable_deformable},
        {"disable_channel_attention", c.ablation.disable_channel_attention},
        {"disable_style_injector", c.ablation.disable_style_injector},
        {"disable_gated_conv", c.ablation.disable_gated_conv}}},
      {"blocks",
       {{"base_channels", c.blocks.base_channels},
        {"kernel_size", c.blocks.kernel_size},
        {"num_resblocks", c.blocks.num_resblocks},
        {"injector_stages", c.blocks.injector_stages},
        {"injection_damping", c.blocks.injection_damping},
        {"discriminator_layers", c.blocks.discriminator_layers}}},
      {"pyramid",
       {{"rescale_factor", c.pyramid.rescale_factor},
        {"num_scales", c.pyramid.num_scales},
        {"min_coarse_dim", c.pyramid.min_coarse_dim}}},
      {"augment",
       {{"kinds", kinds},
        {"rotation_deg", c.magnitudes.rotation_deg},
        {"affine_fraction", c.magnitudes.affine_fraction},
        {"perspective_scale", c.magnitudes.perspective_scale},
        {"erasing_area", c.magnitudes.erasing_area}}},
      {"penalty_point", c.penalty_point == PenaltyPoint::interpolate ? "interpolate" : "fake"},
      {"coarse_noise_amp", c.coarse_noise_amp},
      {"noise_amp_scale", c.noise_amp_scale},
      {"warm_start", c.warm_start},
      {"progress_every", c.progress_every},
      {"seed", c.seed},
  };
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) {
    out = it->get<T>();
  }
}

}  // namespace

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  read_opt(j, "lr", c.lr);
  read_opt(j, "adam_beta1", c.adam_beta1);
  read_opt(j, "adam_beta2", c.adam_beta2);
  read_opt(j, "iters_per_scale", c.iters_per_scale);
  read_opt(j, "d_steps", c.d_steps);
  read_opt(j, "g_steps", c.g_steps);
  if (auto it = j.find("weights"); it != j.end()) {
    read_opt(*it, "alpha", c.weights.alpha);
    read_opt(*it, "beta_coarse", c.weights.beta_coarse);
    read_opt(*it, "beta_fine", c.weights.beta_fine);
    read_opt(*it, "beta_background", c.weights.beta_background);
    read_opt(*it, "lambda_gp", c.weights.lambda_gp);
  }
  if (auto it = j.find("ablation"); it != j.end()) {
    if (it->is_string()) {
      c.ablation = AblationFlags::preset(it->get<std::string>());
    } else {
      read_opt(*it, "disable_deformable", c.ablation.disable_deformable);
      read_opt(*it, "disable_channel_attention", c.ablation.disable_channel_attention);
      read_opt(*it, "disable_style_injector", c.ablation.disable_style_injector);
      read_opt(*it, "disable_gated_conv", c.ablation.disable_gated_conv);
    }
  }
  if (auto it = j.find("blocks"); it != j.end()) {
    read_opt(*it, "base_channels", c.blocks.base_channels);
    read_opt(*it, "kernel_size", c.blocks.kernel_size);
    read_opt(*it, "num_resblocks", c.blocks.num_resblocks);
    read_opt(*it, "injector_stages", c.blocks.injector_stages);
    read_opt(*it, "injection_damping", c.blocks.injection_damping);
    read_opt(*it, "discriminator_layers", c.blocks.discriminator_layers);
  }
  if (auto it = j.find("pyramid"); it != j.end()) {
    read_opt(*it, "rescale_factor", c.pyramid.rescale_factor);
    read_opt(*it, "num_scales", c.pyramid.num_scales);
    read_opt(*it, "min_coarse_dim", c.pyramid.min_coarse_dim);
  }
  if (auto it = j.find("augment"); it != j.end()) {
    if (auto k = it->find("kinds"); k != it->end()) {
      c.augment_kinds.clear();
      for (const auto& name : *k) c.augment_kinds.push_back(augment_kind_from_string(name.get<std::string>()));
    }
    read_opt(*it, "rotation_deg", c.magnitudes.rotation_deg);
    read_opt(*it, "affine_fraction", c.magnitudes.affine_fraction);
    read_opt(*it, "perspective_scale", c.magnitudes.perspective_scale);
    read_opt(*it, "erasing_area", c.magnitudes.erasing_area);
  }
  if (auto it = j.find("penalty_point"); it != j.end()) {
    const auto p = it->get<std::string>();
    if (p == "interpolate") {
      c.penalty_point = PenaltyPoint::interpolate;
    } else if (p == "fake") {
      c.penalty_point = PenaltyPoint::fake;
    } else {
      throw ValidationError("unknown penalty_point: " + p);
    }
  }
  read_opt(j, "coarse_noise_amp", c.coarse_noise_amp);
  read_opt(j, "noise_amp_scale", c.noise_amp_scale);
  read_opt(j, "warm_start", c.warm_start);
  read_opt(j, "progress_every", c.progress_every);
  read_opt(j, "seed", c.seed);
}

void apply_overrides(TrainConfig& config, const json& overrides) {
  if (overrides.is_null()) return;
  if (auto it = overrides.find("profile"); it != overrides.end()) {
    config = TrainConfig::profile(it->get<std::string>());
  }
  try {
    from_json(overrides, config);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  config.validate();
}

void to_json(json& j, const ProgressRecord& r) {
  j = json{{"branch", r.branch}, {"scale", r.scale}, {"coarsest", r.coarsest},
           {"step", r.step},     {"steps", r.steps_per_scale},
           {"l0_g", r.l0_g},     {"l0_d", r.l0_d}, {"l1", r.l1}, {"l2", r.l2}, {"gp", r.gp}};
}

void JsonLinesSink::operator()(const ProgressRecord& record) {
  const auto line = json(record).dump();
  std::lock_guard lock(mutex_);
  out_ << line << '\n';
  out_.flush();
}

// ---------------------------------------------------------------------------
// training

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t scale_seed(uint64_t stack_seed, int scale, uint64_t stream) {
  return splitmix64(splitmix64(stack_seed ^ (stream << 32)) + static_cast<uint64_t>(scale));
}

StyleSource identity_style(const BranchStack& stack) {
  return [&stack](int n) -> torch::Tensor {
    if (stack.kind != BranchKind::roi) return {};
    return stack.pyramid[n].batched();
  };
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  auto from = src.named_parameters(true);
  for (auto& item : dst.named_parameters(true)) {
    const auto* p = from.find(item.key());
    if (p != nullptr && p->sizes() == item.value().sizes()) {
      item.value().copy_(*p);
    }
  }
}

void set_trainable(torch::nn::Module& m, bool trainable) {
  for (auto& p : m.parameters()) p.set_requires_grad(trainable);
}

void check_finite(const torch::Tensor& loss, const char* what, int scale, long step) {
  if (!std::isfinite(loss.item<double>())) {
    std::ostringstream msg;
    msg << "non-finite " << what << " loss at scale " << scale << " step " << step;
    throw TrainingError(msg.str(), scale, step);
  }
}

// Upsampled output of the frozen scales above `scale`; zeros at the coarsest level.
torch::Tensor previous_output(const BranchStack& stack, int scale, const NoiseSource& noise,
                              const StyleSource& style) {
  const auto h = stack.pyramid[scale].height();
  const auto w = stack.pyramid[scale].width();
  if (scale == stack.coarsest()) return torch::zeros({1, 3, h, w});
  torch::NoGradGuard no_grad;
  return resize_tensor(run_stack(stack, scale + 1, noise, style), h, w);
}

}  // namespace

uint64_t branch_seed(uint64_t base_seed, int branch_index) {
  return splitmix64(base_seed * 0x100000001b3ULL + static_cast<uint64_t>(branch_index) + 1);
}

TrainStats train_branch(BranchStack& stack, const TrainConfig& config, const std::string& branch_name,
                        const ProgressSink& progress, const std::function<void(int)>& on_scale_done) {
  config.validate();
  TrainStats stats;
  const int top = stack.coarsest();
  const auto style_identity = identity_style(stack);

  for (int n = top; n >= 0; --n) {
    ScaleModel& model = stack.scales[n];
    if (model.trained) continue;
    for (int k = n + 1; k <= top; ++k) {
      if (!stack.scales[k].trained) throw StateError("coarser scale untrained; scale order violated");
    }

    auto noise_gen = at::make_generator<at::CPUGeneratorImpl>(scale_seed(stack.seed, n, 1));
    std::mt19937_64 aug_rng(scale_seed(stack.seed, n, 2));
    auto random_noise = [&](int k) {
      const auto h = stack.pyramid[k].height();
      const auto w = stack.pyramid[k].width();
      auto z = k == top ? torch::randn({1, 1, h, w}, noise_gen).expand({1, 3, h, w}).contiguous()
                        : torch::randn({1, 3, h, w}, noise_gen);
      return z * stack.scales[k].noise_amp;
    };

    if (config.warm_start && n < top) {
      copy_parameters(*model.generator, *stack.scales[n + 1].generator);
      copy_parameters(*model.discriminator, *stack.scales[n + 1].discriminator);
    }
    set_trainable(*model.generator, true);
    set_trainable(*model.discriminator, true);

    const auto target = stack.target(n);
    const auto mask = stack.mask(n);
    const auto recon_prev = previous_output(stack, n, anchor_noise(stack), style_identity);
    if (n == top) {
      model.noise_amp = config.coarse_noise_amp;
    } else {
      torch::NoGradGuard no_grad;
      model.noise_amp = config.noise_amp_scale * std::sqrt(mse_loss(recon_prev, target, mask).item<double>());
    }
    const auto recon_input = stack.anchor[n] * model.noise_amp + recon_prev;
    const auto recon_style = style_identity(n);
    const auto weights = config.weights.at(stack.kind, n, top);

    torch::optim::Adam opt_g(model.generator->parameters(),
                             torch::optim::AdamOptions(config.lr).betas({config.adam_beta1, config.adam_beta2}));
    torch::optim::Adam opt_d(model.discriminator->parameters(),
                             torch::optim::AdamOptions(config.lr).betas({config.adam_beta1, config.adam_beta2}));
    auto critic = [&](const torch::Tensor& x) { return model.discriminator->forward(x); };
    auto masked = [&](const torch::Tensor& x) { return mask.defined() ? x * mask : x; };

    for (long step = 0; step < config.iters_per_scale; ++step) {
      const auto desc = sample_descriptor(aug_rng(), config.augment_kinds);
      const auto style_random = augmented_style(stack, desc, config.magnitudes);
      const auto prev = previous_output(stack, n, random_noise, style_random);
      const auto z = random_noise(n);
      const auto style_n = style_random(n);

      ProgressRecord rec;
      rec.branch = branch_name;
      rec.scale = n;
      rec.coarsest = top;
      rec.step = step;
      rec.steps_per_scale = config.iters_per_scale;

      torch::Tensor fake_detached;
      {
        torch::NoGradGuard no_grad;
        fake_detached = masked(model.generator->forward(z + prev, prev, style_n));
      }
      for (int d = 0; d < config.d_steps; ++d) {
        opt_d.zero_grad();
        auto adv = adversarial_losses(critic(target), critic(fake_detached));
        auto gp = gradient_penalty(critic, target, fake_detached, noise_gen, config.penalty_point);
        auto loss = discriminator_total(adv.d_term, gp, weights);
        check_finite(loss, "discriminator", n, step);
        loss.backward();
        opt_d.step();
        ++stats.optimizer_updates;
        rec.l0_d = adv.d_term.item<double>();
        rec.gp = gp.item<double>();
      }

      set_trainable(*model.discriminator, false);
      for (int g = 0; g < config.g_steps; ++g) {
        opt_g.zero_grad();
        auto fake = masked(model.generator->forward(z + prev, prev, style_n));
        auto d_fake = critic(fake);
        auto l0 = adversarial_losses(d_fake.detach(), d_fake).g_term;
        auto recon = model.generator->forward(recon_input, recon_prev, recon_style);
        auto l1 = cosine_loss(recon, target, mask);
        auto l2 = mse_loss(recon, target, mask);
        auto loss = generator_total(l0, l1, l2, weights);
        check_finite(loss, "generator", n, step);
        loss.backward();
        opt_g.step();
        ++stats.optimizer_updates;
        rec.l0_g = l0.item<double>();
        rec.l1 = l1.item<double>();
        rec.l2 = l2.item<double>();
      }
      set_trainable(*model.discriminator, true);

      if (progress && (step % config.progress_every == 0 || step + 1 == config.iters_per_scale)) {
        progress(rec);
      }
    }

    model.trained = true;
    model.freeze();
    stats.trained_scales.push_back(n);
    if (on_scale_done) on_scale_done(n);
  }
  return stats;
}

Reconstruction reconstruction_pass(const BranchStack& stack, int scale) {
  torch::NoGradGuard no_grad;
  auto out = run_stack(stack, scale, anchor_noise(stack), identity_style(stack), /*require_trained=*/false);
  const auto target = stack.target(scale);
  const auto mask = stack.mask(scale);
  Reconstruction r;
  r.image = Image::from_unclamped(out);
  r.l1 = cosine_loss(out, target, mask).item<double>();
  r.l2 = mse_loss(out, target, mask).item<double>();
  return r;
}

// ---------------------------------------------------------------------------
// model

bool Model::fully_trained() const {
  for (const auto& s : roi) {
    if (!s.fully_trained()) return false;
  }
  return background.fully_trained();
}

std::string Model::digest() const {
  Sha256 h;
  for (const auto& s : roi) h.update(s.digest());
  h.update(background.digest());
  return h.hex();
}

Model make_model(const Image& source, const std::vector<RoiBox>& boxes, const TrainConfig& config) {
  config.validate();
  validate_boxes(boxes, source.width(), source.height());
  Model m;
  m.source = source;
  m.boxes = boxes;
  m.config = config;
  const auto blocks = config.ablation.apply(config.blocks);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    m.roi.push_back(make_roi_stack(crop_roi(source, boxes[i]), boxes[i], config.pyramid, blocks,
                                   branch_seed(config.seed, static_cast<int>(i))));
  }
  m.background = make_background_stack(source, boxes, config.pyramid, blocks,
                                       branch_seed(config.seed, static_cast<int>(boxes.size())));
  return m;
}

namespace {

std::string branch_name(std::size_t roi_index) { return "roi_" + std::to_string(roi_index); }

using ScalePredicate = std::function<bool(std::size_t branch, int scale)>;

void save_checkpoint_impl(const Model& model, const fs::path& dir, const ScalePredicate& include);

}  // namespace

TrainStats train_model(Model& model, const ProgressSink& progress, const ModelTrainOptions& options) {
  const std::size_t branches = model.roi.size() + 1;
  auto stack_at = [&](std::size_t i) -> BranchStack& { return i < model.roi.size() ? model.roi[i] : model.background; };
  auto name_at = [&](std::size_t i) { return i < model.roi.size() ? branch_name(i) : std::string("background"); };

  std::mutex done_mutex;
  std::vector<std::set<int>> done(branches);
  for (std::size_t i = 0; i < branches; ++i) {
    for (const auto& s : stack_at(i).scales) {
      if (s.trained) done[i].insert(s.scale);
    }
  }
  auto on_done = [&](std::size_t branch, int scale) {
    std::lock_guard lock(done_mutex);
    done[branch].insert(scale);
    if (options.checkpoint_dir) {
      save_checkpoint_impl(model, *options.checkpoint_dir,
                           [&](std::size_t b, int n) { return done[b].count(n) > 0; });
    }
  };

  std::vector<TrainStats> per_branch(branches);
  auto run = [&](std::size_t i) {
    per_branch[i] = train_branch(stack_at(i), model.config, name_at(i), progress,
                                 [&, i](int n) { on_done(i, n); });
  };

  if (options.parallel_branches && branches > 1) {
    std::vector<std::exception_ptr> errors(branches);
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < branches; ++i) {
      workers.emplace_back([&, i] {
        try {
          run(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t i = 0; i < branches; ++i) run(i);
  }

  TrainStats total;
  for (const auto& s : per_branch) {
    total.optimizer_updates += s.optimizer_updates;
    total.trained_scales.insert(total.trained_scales.end(), s.trained_scales.begin(), s.trained_scales.end());
  }
  return total;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

template <typename T>
void write_le(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), bytes.size());
  } else {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T read_le(std::istream& in) {
  std::array<char, sizeof(T)> bytes{};
  in.read(bytes.data(), bytes.size());
  if (!in) throw DigestError("truncated tensor blob");
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  return std::bit_cast<T>(bytes);
}

struct BlobSet {
  std::vector<std::string> names;
  std::vector<torch::Tensor> tensors;
};

BlobSet collect(const torch::nn::Module& module, const std::function<bool(const std::string&)>& keep) {
  BlobSet set;
  for (const auto& item : module.named_parameters(true)) {
    if (keep(item.key())) {
      set.names.push_back(item.key());
      set.tensors.push_back(item.value());
    }
  }
  return set;
}

bool is_injector(const std::string& name) { return name.rfind("injectors.", 0) == 0; }

json write_blob(const BlobSet& set, const fs::path& dir, const std::string& file) {
  write_tensor_blob(set.tensors, dir / file);
  return json{{"file", file}, {"sha256", sha256_file(dir / file)}, {"tensors", set.names}};
}

void save_checkpoint_impl(const Model& model, const fs::path& dir, const ScalePredicate& include) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "mogan-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = model.config;
  json boxes = json::array();
  for (const auto& b : model.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
  manifest["boxes"] = boxes;

  write_tensor_blob({model.source.tensor()}, dir / "source.bin");
  manifest["source"] = {{"file", "source.bin"},
                        {"sha256", sha256_file(dir / "source.bin")},
                        {"height", model.source.height()},
                        {"width", model.source.width()}};

  json branches = json::array();
  const std::size_t count = model.roi.size() + 1;
  for (std::size_t i = 0; i < count; ++i) {
    const bool is_roi = i < model.roi.size();
    const BranchStack& stack = is_roi ? model.roi[i] : model.background;
    const std::string name = is_roi ? branch_name(i) : "background";
    const fs::path sub = dir / name;
    fs::create_directories(sub);
    json scales = json::array();
    for (const auto& s : stack.scales) {
      json entry{{"scale", s.scale}, {"trained", false}, {"noise_amp", 1.0}};
      if (include(i, s.scale)) {
        const std::string prefix = "scale_" + std::to_string(s.scale) + "_";
        entry["trained"] = true;
        entry["noise_amp"] = s.noise_amp;
        json files;
        files["G"] = write_blob(collect(*s.generator, [](const std::string& k) { return !is_injector(k); }), sub,
                                prefix + "G.bin");
        files["D"] = write_blob(collect(*s.discriminator, [](const std::string&) { return true; }), sub,
                                prefix + "D.bin");
        if (stack.kind == BranchKind::roi && s.generator->has_injectors()) {
          files["SI"] = write_blob(collect(*s.generator, is_injector), sub, prefix + "SI.bin");
        }
        entry["files"] = files;
      }
      scales.push_back(entry);
    }
    json b{{"name", name},
           {"kind", std::string(to_string(stack.kind))},
           {"seed", stack.seed},
           {"coarsest", stack.coarsest()},
           {"scales", scales}};
    if (is_roi) b["box"] = {stack.box.x_min, stack.box.y_min, stack.box.x_max, stack.box.y_max};
    branches.push_back(b);
  }
  manifest["branches"] = branches;

  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << manifest.dump(2) << '\n';
  }
  fs::rename(tmp, dir / "manifest.json");
}

void verify(const fs::path& dir, const json& file_entry) {
  const auto file = file_entry.at("file").get<std::string>();
  const auto expected = file_entry.at("sha256").get<std::string>();
  if (!fs::exists(dir / file)) throw DigestError("missing checkpoint blob " + (dir / file).string());
  const auto actual = sha256_file(dir / file);
  if (actual != expected) {
    throw DigestError("digest mismatch for " + (dir / file).string() + ": expected " + expected + ", got " + actual);
  }
}

void load_into(torch::nn::Module& module, const fs::path& dir, const json& entry,
               const std::function<bool(const std::string&)>& keep) {
  auto target = collect(module, keep);
  const auto names = entry.at("tensors").get<std::vector<std::string>>();
  if (names != target.names) {
    throw DigestError("checkpoint tensor layout does not match model for " + entry.at("file").get<std::string>());
  }
  auto tensors = read_tensor_blob(dir / entry.at("file").get<std::string>());
  if (tensors.size() != target.tensors.size()) throw DigestError("tensor count mismatch");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].sizes() != target.tensors[i].sizes()) throw DigestError("tensor shape mismatch for " + names[i]);
    target.tensors[i].copy_(tensors[i]);
  }
}

}  // namespace

void write_tensor_blob(const std::vector<torch::Tensor>& tensors, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& t : tensors) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    write_le<uint32_t>(out, static_cast<uint32_t>(c.dim()));
    for (auto d : c.sizes()) write_le<uint32_t>(out, static_cast<uint32_t>(d));
    const float* data = c.data_ptr<float>();
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(c.numel() * sizeof(float)));
    } else {
      for (int64_t i = 0; i < c.numel(); ++i) write_le<float>(out, data[i]);
    }
  }
}

std::vector<torch::Tensor> read_tensor_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::vector<torch::Tensor> tensors;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto rank = read_le<uint32_t>(in);
    if (rank > 8) throw DigestError("implausible tensor rank in " + path.string());
    std::vector<int64_t> dims;
    for (uint32_t i = 0; i < rank; ++i) dims.push_back(read_le<uint32_t>(in));
    auto t = torch::empty(dims, torch::kFloat32);
    float* data = t.data_ptr<float>();
    if constexpr (std::endian::native == std::endian::little) {
      in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(t.numel() * sizeof(float)));
      if (!in) throw DigestError("truncated tensor blob " + path.string());
    } else {
      for (int64_t i = 0; i < t.numel(); ++i) data[i] = read_le<float>(in);
    }
    tensors.push_back(t);
  }
  return tensors;
}

void save_checkpoint(const Model& model, const fs::path& dir) {
  save_checkpoint_impl(model, dir, [&](std::size_t b, int n) {
    const BranchStack& s = b < model.roi.size() ? model.roi[b] : model.background;
    return s.scales.at(n).trained;
  });
}

Model load_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw NotFoundError("no checkpoint manifest at " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DigestError(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "mogan-checkpoint") throw DigestError("not a mogan checkpoint");

  // Verify everything before touching model state.
  verify(dir, manifest.at("source"));
  for (const auto& b : manifest.at("branches")) {
    const fs::path sub = dir / b.at("name").get<std::string>();
    for (const auto& s : b.at("scales")) {
      if (!s.at("trained").get<bool>()) continue;
      for (const auto& [kind, entry] : s.at("files").items()) verify(sub, entry);
    }
  }

  TrainConfig config;
  from_json(manifest.at("config"), config);
  std::vector<RoiBox> boxes;
  for (const auto& b : manifest.at("boxes")) {
    boxes.push_back(RoiBox{b.at(0).get<int64_t>(), b.at(1).get<int64_t>(), b.at(2).get<int64_t>(),
                           b.at(3).get<int64_t>()});
  }
  auto source_tensors = read_tensor_blob(dir / "source.bin");
  if (source_tensors.size() != 1) throw DigestError("source blob must hold one tensor");
  Model model = make_model(Image(source_tensors[0]), boxes, config);

  const auto& branches = manifest.at("branches");
  if (branches.size() != model.roi.size() + 1) throw DigestError("branch count mismatch");
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const auto& b = branches[i];
    BranchStack& stack = i < model.roi.size() ? model.roi[i] : model.background;
    if (b.at("seed").get<uint64_t>() != stack.seed) throw DigestError("branch seed mismatch");
    const fs::path sub = dir / b.at("name").get<std::string>();
    for (const auto& s : b.at("scales")) {
      if (!s.at("trained").get<bool>()) continue;
      ScaleModel& m = stack.scales.at(s.at("scale").get<int>());
      const auto& files = s.at("files");
      load_into(*m.generator, sub, files.at("G"), [](const std::string& k) { return !is_injector(k); });
      load_into(*m.discriminator, sub, files.at("D"), [](const std::string&) { return true; });
      if (files.contains("SI")) load_into(*m.generator, sub, files.at("SI"), is_injector);
      m.noise_amp = s.at("noise_amp").get<double>();
      m.trained = true;
      m.freeze();
    }
  }
  return model;
}

}  // namespace mogan
