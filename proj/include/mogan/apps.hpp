#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mogan/augment.hpp"
#include "mogan/imaging.hpp"
#include "mogan/trainer.hpp"

namespace mogan {

enum class SampleKind { random, edit, animation_frame };

std::string_view to_string(SampleKind kind);
SampleKind sample_kind_from_string(std::string_view name);

/// Everything needed, together with the checkpoint, to regenerate a sample.
struct SampleRecord {
  std::string id;
  std::string project_id;
  SampleKind kind = SampleKind::random;
  uint64_t seed = 0;
  /// One descriptor per ROI box.
  std::vector<AugmentDescriptor> augment;
  int band_px = 3;
  std::string output;
  /// Edit samples: file name of the edited input stored next to the sample.
  std::string edit_input;
  int min_edit_scale = 0;
  /// Animation frames: index within the sequence.
  int frame = -1;
  nlohmann::json metrics = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const SampleRecord& r);
void from_json(const nlohmann::json& j, SampleRecord& r);

struct Sample {
  Image image;
  std::vector<Image> roi_images;
  Image background;
  SampleRecord record;
};

constexpr int kDefaultBandPx = 3;

/// Noise seed of ROI branch `box` (or of the background when box < 0) for a sample seed.
uint64_t sample_noise_seed(uint64_t sample_seed, int box);

/// Runs every ROI branch with the given descriptors, the background branch,
/// and fuses. `edited` (full-size) replaces the injector input when set.
Sample compose_sample(const Model& model, uint64_t seed, const std::vector<AugmentDescriptor>& augment,
                      int band_px, const std::optional<Image>& edited = std::nullopt, int min_edit_scale = 0);

/// Random noise and one random augmentation per ROI box.
Sample generate_sample(const Model& model, uint64_t seed, int band_px = kDefaultBandPx);
std::vector<Sample> generate_samples(const Model& model, int count, uint64_t seed, int band_px = kDefaultBandPx);

/// Editing: the edited image (same size as the source) drives every style
/// injector with all parameters frozen; the background is freshly generated.
Sample edit_sample(const Model& model, const Image& edited, uint64_t seed, int band_px = kDefaultBandPx,
                   int min_edit_scale = 0);

/// Fixed noise, fixed augmentation kind, level ramped from 0 to level_max.
std::vector<Sample> animate(const Model& model, AugmentKind kind, int frames, double level_max, uint64_t seed,
                            int band_px = kDefaultBandPx);

/// Rebuilds a sample from its record. Edit records need the edited input.
Sample regenerate(const Model& model, const SampleRecord& record, const std::optional<Image>& edited = std::nullopt);

/// Mean absolute pixel difference.
double mean_abs_diff(const Image& a, const Image& b);

}  // namespace mogan
