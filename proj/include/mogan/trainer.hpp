#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mogan/augment.hpp"
#include "mogan/generators.hpp"
#include "mogan/imaging.hpp"
#include "mogan/losses.hpp"

namespace mogan {

struct AblationFlags {
  bool disable_deformable = false;
  bool disable_channel_attention = false;
  bool disable_style_injector = false;
  bool disable_gated_conv = false;

  /// "full", "minus_deformable", "minus_attention", "minus_injector", "baseline".
  static AblationFlags preset(std::string_view name);
  static std::vector<std::string> preset_names();

  /// Applies the flags to a block configuration.
  BlockConfig apply(BlockConfig config) const;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct TrainConfig {
  double lr = 3e-4;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  int iters_per_scale = 2000;
  int d_steps = 3;
  int g_steps = 3;
  LossSchedule weights;
  AblationFlags ablation;
  BlockConfig blocks;
  PyramidSpec pyramid;
  AugmentMagnitudes magnitudes;
  std::vector<AugmentKind> augment_kinds = default_augment_kinds();
  PenaltyPoint penalty_point = PenaltyPoint::interpolate;
  /// Coarsest-scale noise amplitude.
  double coarse_noise_amp = 1.0;
  /// Finer scales: amplitude = noise_amp_scale * RMSE(upsampled reconstruction, target).
  double noise_amp_scale = 0.1;
  /// Start each scale from the next-coarser scale's trained weights.
  bool warm_start = true;
  /// Emit a progress record every this many iterations (and on the last one).
  int progress_every = 10;
  uint64_t seed = 0;

  static TrainConfig paper();
  /// Same hyper-parameters, 200 iterations per scale.
  static TrainConfig desk();
  static TrainConfig profile(std::string_view name);

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their current values, so a partial object acts as overrides.
void from_json(const nlohmann::json& j, TrainConfig& c);
void apply_overrides(TrainConfig& config, const nlohmann::json& overrides);

struct ProgressRecord {
  std::string branch;  // "roi_0", "roi_1", ..., "background"
  int scale = 0;
  int coarsest = 0;
  long step = 0;
  long steps_per_scale = 0;
  double l0_g = 0, l0_d = 0, l1 = 0, l2 = 0, gp = 0;
};

void to_json(nlohmann::json& j, const ProgressRecord& r);

using ProgressSink = std::function<void(const ProgressRecord&)>;

/// Serialises records from any number of producers as JSON lines.
class JsonLinesSink {
 public:
  explicit JsonLinesSink(std::ostream& out) : out_(out) {}
  void operator()(const ProgressRecord& record);
  ProgressSink as_sink() {
    return [this](const ProgressRecord& r) { (*this)(r); };
  }

 private:
  std::mutex mutex_;
  std::ostream& out_;
};

struct TrainStats {
  long optimizer_updates = 0;
  std::vector<int> trained_scales;  // in training order
};

/// Trains every untrained scale from coarsest to finest and freezes it.
/// `on_scale_done` runs after each scale is frozen (used for resumable checkpoints).
TrainStats train_branch(BranchStack& stack, const TrainConfig& config, const std::string& branch_name,
                        const ProgressSink& progress = {},
                        const std::function<void(int scale)>& on_scale_done = {});

struct Reconstruction {
  Image image;
  double l1 = 0;
  double l2 = 0;
};

/// Generation with the fixed anchor noise and identity augmentation down to
/// `scale`, scored against the target at that scale. Works on untrained scales.
Reconstruction reconstruction_pass(const BranchStack& stack, int scale);

/// One trained (or in-training) model: a source image, its ROI boxes, one
/// ROI stack per box, and one background stack.
struct Model {
  Image source;
  std::vector<RoiBox> boxes;
  TrainConfig config;
  std::vector<BranchStack> roi;
  BranchStack background;

  bool fully_trained() const;
  std::string digest() const;
};

/// Builds pyramids and freshly initialised stacks. Branch seeds derive from config.seed.
Model make_model(const Image& source, const std::vector<RoiBox>& boxes, const TrainConfig& config);

uint64_t branch_seed(uint64_t base_seed, int branch_index);

struct ModelTrainOptions {
  /// Train the branches on separate threads.
  bool parallel_branches = false;
  /// Written after every completed scale when set.
  std::optional<std::filesystem::path> checkpoint_dir;
};

TrainStats train_model(Model& model, const ProgressSink& progress = {}, const ModelTrainOptions& options = {});

/// Directory layout: manifest.json, source.png, {roi_<i>|background}/scale_<n>_{G|D|SI}.bin.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
/// Verifies every blob digest before loading; throws DigestError on mismatch.
Model load_checkpoint(const std::filesystem::path& dir);

/// Blob encoding: per tensor, uint32 rank, uint32 dims, then little-endian float32 data.
void write_tensor_blob(const std::vector<torch::Tensor>& tensors, const std::filesystem::path& path);
std::vector<torch::Tensor> read_tensor_blob(const std::filesystem::path& path);

}  // namespace mogan
