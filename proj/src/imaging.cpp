#include "mogan/imaging.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mogan {

namespace F = torch::nn::functional;

Image::Image(torch::Tensor pixels) {
  if (!pixels.defined()) {
    throw ValidationError("image tensor is undefined");
  }
  if (pixels.dim() == 4 && pixels.size(0) == 1) {
    pixels = pixels.squeeze(0);
  }
  if (pixels.dim() != 3 || pixels.size(0) != 3) {
    std::ostringstream msg;
    msg << "image tensor must be 3xHxW, got " << pixels.sizes();
    throw ValidationError(msg.str());
  }
  if (pixels.size(1) < 1 || pixels.size(2) < 1) {
    throw ValidationError("image must have positive extent");
  }
  pixels = pixels.detach().to(torch::kFloat32).contiguous();
  if (!torch::isfinite(pixels).all().item<bool>()) {
    throw ValidationError("image contains non-finite values");
  }
  if (pixels.min().item<float>() < 0.0f || pixels.max().item<float>() > 1.0f) {
    throw ValidationError("image values must lie in [0,1]");
  }
  pixels_ = std::move(pixels);
}

Image Image::from_unclamped(const torch::Tensor& pixels) {
  auto t = pixels.detach().to(torch::kFloat32);
  return Image(torch::nan_to_num(t, 0.0).clamp(0.0, 1.0));
}

Image Image::zeros(int64_t height, int64_t width) {
  return Image(torch::zeros({3, height, width}));
}

Image Image::filled(int64_t height, int64_t width, float value) {
  return Image(torch::full({3, height, width}, value));
}

float Image::at(int64_t channel, int64_t y, int64_t x) const {
  return pixels_.accessor<float, 3>()[channel][y][x];
}

bool Image::equals(const Image& other) const {
  if (empty() || other.empty()) {
    return empty() == other.empty();
  }
  return pixels_.sizes() == other.pixels_.sizes() && torch::equal(pixels_, other.pixels_);
}

bool RoiBox::overlaps(const RoiBox& other) const {
  return x_min < other.x_max && other.x_min < x_max && y_min < other.y_max &&
         other.y_min < y_max;
}

void RoiBox::validate(int64_t image_width, int64_t image_height) const {
  auto fail = [&](const char* what) {
    std::ostringstream msg;
    msg << "roi box (" << x_min << "," << y_min << "," << x_max << "," << y_max << ") violates "
        << what << " for image " << image_width << "x" << image_height;
    throw ValidationError(msg.str());
  };
  if (x_min < 0) fail("x_min >= 0");
  if (y_min < 0) fail("y_min >= 0");
  if (x_min >= x_max) fail("x_min < x_max");
  if (y_min >= y_max) fail("y_min < y_max");
  if (x_max > image_width) fail("x_max <= width");
  if (y_max > image_height) fail("y_max <= height");
}

void validate_boxes(const std::vector<RoiBox>& boxes, int64_t image_width,
                    int64_t image_height) {
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    boxes[i].validate(image_width, image_height);
    for (std::size_t j = 0; j < i; ++j) {
      if (boxes[i].overlaps(boxes[j])) {
        std::ostringstream msg;
        msg << "roi boxes " << j << " and " << i << " overlap";
        throw ValidationError(msg.str());
      }
    }
  }
}

RoiBox rescale_box(const RoiBox& box, double factor, int64_t level_width,
                   int64_t level_height) {
  auto scale_axis = [factor](int64_t lo, int64_t hi, int64_t extent) {
    int64_t a = std::clamp<int64_t>(std::llround(static_cast<double>(lo) * factor), 0, extent);
    int64_t b = std::clamp<int64_t>(std::llround(static_cast<double>(hi) * factor), 0, extent);
    if (b <= a) {
      b = a + 1;
      if (b > extent) {
        b = extent;
        a = extent - 1;
      }
    }
    return std::pair{a, b};
  };
  auto [x0, x1] = scale_axis(box.x_min, box.x_max, level_width);
  auto [y0, y1] = scale_axis(box.y_min, box.y_max, level_height);
  return RoiBox{x0, y0, x1, y1};
}

int64_t level_extent(int64_t dim, double rescale_factor, int level) {
  return std::llround(static_cast<double>(dim) / std::pow(rescale_factor, level));
}

int max_admissible_scales(int64_t height, int64_t width, double rescale_factor,
                          int min_coarse_dim) {
  if (rescale_factor <= 1.0) {
    throw ValidationError("rescale factor must be > 1");
  }
  if (std::min(height, width) < min_coarse_dim) {
    std::ostringstream msg;
    msg << "image " << width << "x" << height << " is smaller than min_coarse_dim "
        << min_coarse_dim;
    throw ValidationError(msg.str());
  }
  int n = 0;
  while (std::min(level_extent(height, rescale_factor, n + 1),
                  level_extent(width, rescale_factor, n + 1)) >= min_coarse_dim) {
    ++n;
  }
  return n;
}

int PyramidSpec::resolve(int64_t height, int64_t width) const {
  const int max_n = max_admissible_scales(height, width, rescale_factor, min_coarse_dim);
  if (num_scales < 0) {
    return max_n;
  }
  if (num_scales > max_n) {
    std::ostringstream msg;
    msg << "num_scales " << num_scales << " takes a " << width << "x" << height
        << " image below min_coarse_dim " << min_coarse_dim << " (max " << max_n << ")";
    throw ValidationError(msg.str());
  }
  return num_scales;
}

torch::Tensor resize_tensor(const torch::Tensor& batched, int64_t height, int64_t width) {
  if (batched.size(2) == height && batched.size(3) == width) {
    return batched;
  }
  const bool shrinking = height < batched.size(2) || width < batched.size(3);
  return F::interpolate(batched, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{height, width})
                                     .mode(torch::kBilinear)
                                     .align_corners(false)
                                     .antialias(shrinking));
}

Image resize(const Image& image, int64_t height, int64_t width) {
  if (height == image.height() && width == image.width()) {
    return image;
  }
  return Image::from_unclamped(resize_tensor(image.batched(), height, width).squeeze(0));
}

std::vector<Image> build_pyramid(const Image& image, const PyramidSpec& spec) {
  const int levels = spec.resolve(image.height(), image.width());
  std::vector<Image> pyramid;
  pyramid.reserve(levels + 1);
  pyramid.push_back(image);
  for (int n = 1; n <= levels; ++n) {
    pyramid.push_back(resize(image, level_extent(image.height(), spec.rescale_factor, n),
                             level_extent(image.width(), spec.rescale_factor, n)));
  }
  return pyramid;
}

Image crop_roi(const Image& image, const RoiBox& box) {
  box.validate(image.width(), image.height());
  using torch::indexing::Slice;
  return Image(image.tensor()
                   .index({Slice(), Slice(box.y_min, box.y_max), Slice(box.x_min, box.x_max)})
                   .clone());
}

Image paste(const Image& image, const Image& patch, const RoiBox& box) {
  box.validate(image.width(), image.height());
  if (patch.height() != box.height() || patch.width() != box.width()) {
    throw ValidationError("patch dimensions do not match box");
  }
  using torch::indexing::Slice;
  auto out = image.tensor().clone();
  out.index_put_({Slice(), Slice(box.y_min, box.y_max), Slice(box.x_min, box.x_max)},
                 patch.tensor());
  return Image(out);
}

torch::Tensor box_mask(int64_t height, int64_t width, const std::vector<RoiBox>& boxes) {
  using torch::indexing::Slice;
  auto mask = torch::ones({1, height, width});
  for (const auto& b : boxes) {
    mask.index_put_({Slice(), Slice(b.y_min, b.y_max), Slice(b.x_min, b.x_max)}, 0.0f);
  }
  return mask;
}

MaskedImage mask_background(const Image& image, const std::vector<RoiBox>& boxes) {
  validate_boxes(boxes, image.width(), image.height());
  auto mask = box_mask(image.height(), image.width(), boxes);
  // where() keeps visible pixels bit-exact instead of multiplying through.
  auto pixels = torch::where(mask.to(torch::kBool), image.tensor(), torch::zeros_like(image.tensor()));
  return MaskedImage{Image(pixels), mask};
}

double fuse_weight(int64_t depth, int band_px) {
  if (band_px <= 0) {
    return 1.0;
  }
  return std::min(1.0, static_cast<double>(depth + 1) / static_cast<double>(band_px + 1));
}

Image fuse(const std::vector<std::pair<Image, RoiBox>>& roi_samples, const Image& background,
           int band_px) {
  if (band_px < 0) {
    throw ValidationError("band_px must be >= 0");
  }
  std::vector<RoiBox> boxes;
  for (const auto& [sample, box] : roi_samples) {
    if (sample.height() != box.height() || sample.width() != box.width()) {
      std::ostringstream msg;
      msg << "roi sample " << sample.width() << "x" << sample.height()
          << " does not match its box " << box.width() << "x" << box.height();
      throw ValidationError(msg.str());
    }
    boxes.push_back(box);
  }
  validate_boxes(boxes, background.width(), background.height());

  using torch::indexing::Slice;
  auto out = background.tensor().clone();
  for (const auto& [sample, box] : roi_samples) {
    const int64_t h = box.height();
    const int64_t w = box.width();
    auto weights = torch::empty({1, h, w});
    auto acc = weights.accessor<float, 3>();
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const int64_t depth = std::min({y, h - 1 - y, x, w - 1 - x});
        acc[0][y][x] = static_cast<float>(fuse_weight(depth, band_px));
      }
    }
    auto region = Slice(box.y_min, box.y_max);
    auto cols = Slice(box.x_min, box.x_max);
    auto bg = out.index({Slice(), region, cols});
    auto blended = torch::where(weights >= 1.0f, sample.tensor(),
                                torch::lerp(bg, sample.tensor(), weights));
    out.index_put_({Slice(), region, cols}, blended);
  }
  return Image::from_unclamped(out);
}

namespace {

Image from_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat as_float;
  const double scale = rgb.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  rgb.convertTo(as_float, CV_32FC3, scale);
  auto t = torch::from_blob(as_float.data, {as_float.rows, as_float.cols, 3}, torch::kFloat32)
               .permute({2, 0, 1})
               .clone();
  return Image::from_unclamped(t);
}

cv::Mat to_mat(const Image& image) {
  auto hwc = (image.tensor() * 255.0f)
                 .round()
                 .clamp(0, 255)
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(image.height()), static_cast<int>(image.width()), CV_8UC3,
              hwc.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR | cv::IMREAD_ANYDEPTH);
  if (bgr.empty()) {
    throw ValidationError("cannot read image: " + path.string());
  }
  return from_mat(bgr);
}

void write_png(const Image& image, const std::filesystem::path& path) {
  if (!cv::imwrite(path.string(), to_mat(image))) {
    throw Error("cannot write png: " + path.string());
  }
}

std::vector<unsigned char> encode_png(const Image& image) {
  std::vector<unsigned char> bytes;
  if (!cv::imencode(".png", to_mat(image), bytes)) {
    throw Error("png encoding failed");
  }
  return bytes;
}

Image decode_image(const std::vector<unsigned char>& bytes) {
  cv::Mat bgr = cv::imdecode(bytes, cv::IMREAD_COLOR | cv::IMREAD_ANYDEPTH);
  if (bgr.empty()) {
    throw ValidationError("cannot decode image bytes");
  }
  return from_mat(bgr);
}

void write_mask_png(const torch::Tensor& mask, const std::filesystem::path& path) {
  auto m = (mask.reshape({mask.size(-2), mask.size(-1)}) > 0.5f).to(torch::kUInt8).mul(255).contiguous();
  cv::Mat mat(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr());
  if (!cv::imwrite(path.string(), mat)) {
    throw Error("cannot write mask: " + path.string());
  }
}

torch::Tensor read_mask_png(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (mat.empty()) {
    throw ValidationError("cannot read mask: " + path.string());
  }
  auto t = torch::from_blob(mat.data, {1, mat.rows, mat.cols}, torch::kUInt8).clone();
  return (t > 127).to(torch::kFloat32);
}

}  // namespace mogan
