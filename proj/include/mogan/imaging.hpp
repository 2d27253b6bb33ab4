#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "mogan/error.hpp"

namespace mogan {

/// RGB image stored as a contiguous 3xHxW float32 tensor with values in [0,1].
class Image {
 public:
  Image() = default;

  /// Takes ownership of a 3xHxW (or 1x3xHxW) tensor. Throws ValidationError when
  /// values are non-finite or fall outside [0,1].
  explicit Image(torch::Tensor pixels);

  /// Clamps into [0,1] first; used for network outputs.
  static Image from_unclamped(const torch::Tensor& pixels);
  static Image zeros(int64_t height, int64_t width);
  static Image filled(int64_t height, int64_t width, float value);

  int64_t height() const { return pixels_.size(1); }
  int64_t width() const { return pixels_.size(2); }
  bool empty() const { return !pixels_.defined(); }

  const torch::Tensor& tensor() const { return pixels_; }
  /// 1x3xHxW view for network consumption.
  torch::Tensor batched() const { return pixels_.unsqueeze(0); }

  float at(int64_t channel, int64_t y, int64_t x) const;

  bool equals(const Image& other) const;

 private:
  torch::Tensor pixels_;
};

/// Axis-aligned box in pixel coordinates, [x_min, x_max) x [y_min, y_max).
struct RoiBox {
  int64_t x_min = 0;
  int64_t y_min = 0;
  int64_t x_max = 0;
  int64_t y_max = 0;

  int64_t width() const { return x_max - x_min; }
  int64_t height() const { return y_max - y_min; }
  bool overlaps(const RoiBox& other) const;

  /// Throws ValidationError naming the violated bound.
  void validate(int64_t image_width, int64_t image_height) const;

  friend bool operator==(const RoiBox&, const RoiBox&) = default;
};

/// Pairwise overlap and bounds check for a box set.
void validate_boxes(const std::vector<RoiBox>& boxes, int64_t image_width, int64_t image_height);

/// Box coordinates mapped onto a pyramid level of the given size. Coordinates
/// are scaled and rounded, clamped to the image, and kept at least 1 px wide.
RoiBox rescale_box(const RoiBox& box, double factor, int64_t level_width, int64_t level_height);

struct PyramidSpec {
  double rescale_factor = 4.0 / 3.0;
  /// Number of downsampling steps N; negative means derive the largest admissible N.
  int num_scales = -1;
  int min_coarse_dim = 25;

  /// N for an image of this size; throws when the explicit N is inadmissible.
  int resolve(int64_t height, int64_t width) const;
};

/// round(dim / r^n)
int64_t level_extent(int64_t dim, double rescale_factor, int level);

/// Largest N keeping both dimensions of level N at or above min_coarse_dim.
/// Throws ValidationError if the finest image is itself too small.
int max_admissible_scales(int64_t height, int64_t width, double rescale_factor, int min_coarse_dim);

/// Levels [I_0 ... I_N]; I_0 is the input. Each level is resampled directly from I_0.
std::vector<Image> build_pyramid(const Image& image, const PyramidSpec& spec);

/// Bilinear resize; anti-aliased when shrinking.
Image resize(const Image& image, int64_t height, int64_t width);
/// Same for a batched 1xCxHxW tensor, no clamping.
torch::Tensor resize_tensor(const torch::Tensor& batched, int64_t height, int64_t width);

Image crop_roi(const Image& image, const RoiBox& box);

/// Writes `patch` into a copy of `image` at the box location.
Image paste(const Image& image, const Image& patch, const RoiBox& box);

struct MaskedImage {
  Image image;
  /// 1xHxW float tensor: 1 = background (visible), 0 = inside an ROI box.
  torch::Tensor mask;
};

torch::Tensor box_mask(int64_t height, int64_t width, const std::vector<RoiBox>& boxes);

MaskedImage mask_background(const Image& image, const std::vector<RoiBox>& boxes);

/// Pastes every ROI sample over `background`, cross-fading linearly over a
/// band of `band_px` pixels inside each box border.
Image fuse(const std::vector<std::pair<Image, RoiBox>>& roi_samples, const Image& background,
           int band_px);

/// ROI weight at a box pixel whose distance to the nearest box edge is `depth` (0 on the border).
double fuse_weight(int64_t depth, int band_px);

Image read_image(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);
/// Encodes to PNG bytes in memory.
std::vector<unsigned char> encode_png(const Image& image);
Image decode_image(const std::vector<unsigned char>& bytes);

/// Single-channel 0/255 PNG.
void write_mask_png(const torch::Tensor& mask, const std::filesystem::path& path);
torch::Tensor read_mask_png(const std::filesystem::path& path);

}  // namespace mogan
