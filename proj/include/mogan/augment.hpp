#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mogan/imaging.hpp"

namespace mogan {

enum class AugmentKind { identity, vflip, hflip, rotation, affine, perspective, erasing };

std::string_view to_string(AugmentKind kind);
/// Throws ValidationError for unknown names.
AugmentKind augment_kind_from_string(std::string_view name);

/// The structure-preserving family used during training (flips, rotation,
/// affine, perspective, erasing) plus identity.
std::vector<AugmentKind> default_augment_kinds();

/// How far each kind goes at level 1.
struct AugmentMagnitudes {
  double rotation_deg = 30.0;
  /// Max shear factor and max translation as a fraction of the image extent.
  double affine_fraction = 0.10;
  /// Max inward corner displacement as a fraction of half the image extent.
  double perspective_scale = 0.20;
  /// Erased area as a fraction of the image area.
  double erasing_area = 0.20;
};

struct AugmentDescriptor {
  AugmentKind kind = AugmentKind::identity;
  double level = 0.0;
  uint64_t seed = 0;

  friend bool operator==(const AugmentDescriptor&, const AugmentDescriptor&) = default;
};

void to_json(nlohmann::json& j, const AugmentDescriptor& d);
void from_json(const nlohmann::json& j, AugmentDescriptor& d);

/// Deterministic in (image, descriptor). Geometric kinds zero-fill pixels whose
/// source falls outside the image. Level 0 returns the input unchanged.
Image apply(const Image& image, const AugmentDescriptor& desc,
            const AugmentMagnitudes& magnitudes = {});

/// Uniform kind from `allowed_kinds`, uniform level in [0,1]; reproducible from rng_seed.
AugmentDescriptor sample_descriptor(uint64_t rng_seed, const std::vector<AugmentKind>& allowed_kinds);

/// Fixed kind and seed, levels linearly spaced from 0 to level_max.
std::vector<AugmentDescriptor> level_schedule(AugmentKind kind, int num_frames, double level_max,
                                              uint64_t seed = 0);

/// Signed rotation angle in degrees that a rotation descriptor produces.
double rotation_angle_deg(const AugmentDescriptor& desc, const AugmentMagnitudes& magnitudes = {});

/// Samples `image` (3xHxW) through an output->source projective map given
/// row-major as 3x3. Bilinear inside the image rectangle, zero outside.
torch::Tensor warp_inverse(const torch::Tensor& image, const std::array<double, 9>& out_to_src);

}  // namespace mogan
