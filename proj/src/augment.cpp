#include "mogan/augment.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <random>

namespace mogan {

namespace {

constexpr std::array<std::pair<AugmentKind, std::string_view>, 7> kKindNames{{
    {AugmentKind::identity, "identity"},
    {AugmentKind::vflip, "vflip"},
    {AugmentKind::hflip, "hflip"},
    {AugmentKind::rotation, "rotation"},
    {AugmentKind::affine, "affine"},
    {AugmentKind::perspective, "perspective"},
    {AugmentKind::erasing, "erasing"},
}};

using Mat3 = Eigen::Matrix3d;

std::array<double, 9> to_array(const Mat3& m) {
  return {m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2), m(2, 0), m(2, 1), m(2, 2)};
}

Mat3 translation(double tx, double ty) {
  Mat3 m = Mat3::Identity();
  m(0, 2) = tx;
  m(1, 2) = ty;
  return m;
}

double symmetric_uniform(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
}

// Maps output pixel -> source pixel for a rotation by +angle about the centre.
Mat3 rotation_inverse(double angle_deg, int64_t h, int64_t w) {
  const double t = angle_deg * std::numbers::pi / 180.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  Mat3 r = Mat3::Identity();
  r(0, 0) = std::cos(t);
  r(0, 1) = std::sin(t);
  r(1, 0) = -std::sin(t);
  r(1, 1) = std::cos(t);
  return translation(cx, cy) * r * translation(-cx, -cy);
}

Mat3 affine_inverse(std::mt19937_64& rng, double amount, int64_t h, int64_t w) {
  const double shx = symmetric_uniform(rng) * amount;
  const double shy = symmetric_uniform(rng) * amount;
  const double tx = symmetric_uniform(rng) * amount * static_cast<double>(w);
  const double ty = symmetric_uniform(rng) * amount * static_cast<double>(h);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  Mat3 shear = Mat3::Identity();
  shear(0, 1) = shx;
  shear(1, 0) = shy;
  const Mat3 forward = translation(tx, ty) * translation(cx, cy) * shear * translation(-cx, -cy);
  return forward.inverse();
}

// Homography H with H * from_i ~ to_i for four point pairs.
Mat3 homography(const std::array<Eigen::Vector2d, 4>& from, const std::array<Eigen::Vector2d, 4>& to) {
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = from[i].x(), y = from[i].y();
    const double u = to[i].x(), v = to[i].y();
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = a.fullPivLu().solve(b);
  Mat3 m;
  m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return m;
}

Mat3 perspective_inverse(std::mt19937_64& rng, double amount, int64_t h, int64_t w) {
  const double max_x = amount * static_cast<double>(w) / 2.0;
  const double max_y = amount * static_cast<double>(h) / 2.0;
  const double r = static_cast<double>(w) - 1.0;
  const double btm = static_cast<double>(h) - 1.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::array<Eigen::Vector2d, 4> corners{
      Eigen::Vector2d{0.0, 0.0}, Eigen::Vector2d{r, 0.0}, Eigen::Vector2d{r, btm},
      Eigen::Vector2d{0.0, btm}};
  const std::array<double, 4> sx{1.0, -1.0, -1.0, 1.0};
  const std::array<double, 4> sy{1.0, 1.0, -1.0, -1.0};
  std::array<Eigen::Vector2d, 4> moved;
  for (int i = 0; i < 4; ++i) {
    const double dx = unit(rng) * max_x;
    const double dy = unit(rng) * max_y;
    moved[i] = corners[i] + Eigen::Vector2d{sx[i] * dx, sy[i] * dy};
  }
  // The output shows the source corners at the moved positions.
  return homography(moved, corners);
}

torch::Tensor erase(const torch::Tensor& image, std::mt19937_64& rng, double area_fraction) {
  const int64_t h = image.size(1);
  const int64_t w = image.size(2);
  const double area = area_fraction * static_cast<double>(h * w);
  const double log_ratio =
      std::uniform_real_distribution<double>(std::log(0.3), std::log(3.3))(rng);
  const double ratio = std::exp(log_ratio);
  const int64_t eh = std::clamp<int64_t>(std::llround(std::sqrt(area * ratio)), 1, h);
  const int64_t ew = std::clamp<int64_t>(std::llround(std::sqrt(area / ratio)), 1, w);
  const int64_t y0 = std::uniform_int_distribution<int64_t>(0, h - eh)(rng);
  const int64_t x0 = std::uniform_int_distribution<int64_t>(0, w - ew)(rng);
  using torch::indexing::Slice;
  auto out = image.clone();
  out.index_put_({Slice(), Slice(y0, y0 + eh), Slice(x0, x0 + ew)}, 0.0f);
  return out;
}

}  // namespace

std::string_view to_string(AugmentKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

AugmentKind augment_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw ValidationError("unknown augmentation kind: " + std::string(name));
}

std::vector<AugmentKind> default_augment_kinds() {
  return {AugmentKind::identity, AugmentKind::vflip,       AugmentKind::hflip,
          AugmentKind::rotation, AugmentKind::affine,      AugmentKind::perspective,
          AugmentKind::erasing};
}

void to_json(nlohmann::json& j, const AugmentDescriptor& d) {
  j = nlohmann::json{{"kind", std::string(to_string(d.kind))}, {"level", d.level}, {"seed", d.seed}};
}

void from_json(const nlohmann::json& j, AugmentDescriptor& d) {
  d.kind = augment_kind_from_string(j.at("kind").get<std::string>());
  d.level = j.at("level").get<double>();
  d.seed = j.at("seed").get<uint64_t>();
}

torch::Tensor warp_inverse(const torch::Tensor& image, const std::array<double, 9>& m) {
  const int64_t h = image.size(1);
  const int64_t w = image.size(2);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto ys = torch::arange(h, opts).view({h, 1}).expand({h, w});
  auto xs = torch::arange(w, opts).view({1, w}).expand({h, w});
  auto denom = m[6] * xs + m[7] * ys + m[8];
  auto sx = (m[0] * xs + m[1] * ys + m[2]) / denom;
  auto sy = (m[3] * xs + m[4] * ys + m[5]) / denom;

  constexpr double eps = 1e-9;
  auto inside = (sx >= -eps) & (sx <= static_cast<double>(w - 1) + eps) & (sy >= -eps) &
                (sy <= static_cast<double>(h - 1) + eps);
  sx = sx.clamp(0.0, static_cast<double>(w - 1));
  sy = sy.clamp(0.0, static_cast<double>(h - 1));
  auto x0 = sx.floor();
  auto y0 = sy.floor();
  auto fx = (sx - x0).to(torch::kFloat32);
  auto fy = (sy - y0).to(torch::kFloat32);
  auto x0i = x0.to(torch::kLong);
  auto y0i = y0.to(torch::kLong);
  auto x1i = (x0i + 1).clamp_max(w - 1);
  auto y1i = (y0i + 1).clamp_max(h - 1);

  auto flat = image.reshape({image.size(0), h * w});
  auto gather = [&](const torch::Tensor& yi, const torch::Tensor& xi) {
    auto idx = (yi * w + xi).reshape({-1});
    return flat.index_select(1, idx).reshape({image.size(0), h, w});
  };
  auto top = gather(y0i, x0i) * (1 - fx) + gather(y0i, x1i) * fx;
  auto bottom = gather(y1i, x0i) * (1 - fx) + gather(y1i, x1i) * fx;
  auto out = top * (1 - fy) + bottom * fy;
  return torch::where(inside.unsqueeze(0), out, torch::zeros_like(out));
}

double rotation_angle_deg(const AugmentDescriptor& desc, const AugmentMagnitudes& magnitudes) {
  std::mt19937_64 rng(desc.seed);
  const double sign = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  return sign * desc.level * magnitudes.rotation_deg;
}

Image apply(const Image& image, const AugmentDescriptor& desc, const AugmentMagnitudes& magnitudes) {
  if (desc.level < 0.0 || desc.level > 1.0 || !std::isfinite(desc.level)) {
    throw ValidationError("augmentation level must lie in [0,1]");
  }
  if (desc.kind == AugmentKind::identity || desc.level == 0.0) {
    return image;
  }
  const auto& px = image.tensor();
  const int64_t h = image.height();
  const int64_t w = image.width();
  std::mt19937_64 rng(desc.seed);
  // First draw is reserved for the rotation sign so every kind consumes the same prefix.
  const bool positive = std::bernoulli_distribution(0.5)(rng);

  switch (desc.kind) {
    case AugmentKind::vflip:
      return Image(px.flip({1}));
    case AugmentKind::hflip:
      return Image(px.flip({2}));
    case AugmentKind::rotation: {
      const double angle = (positive ? 1.0 : -1.0) * desc.level * magnitudes.rotation_deg;
      return Image::from_unclamped(warp_inverse(px, to_array(rotation_inverse(angle, h, w))));
    }
    case AugmentKind::affine:
      return Image::from_unclamped(warp_inverse(
          px, to_array(affine_inverse(rng, magnitudes.affine_fraction * desc.level, h, w))));
    case AugmentKind::perspective:
      return Image::from_unclamped(warp_inverse(
          px, to_array(perspective_inverse(rng, magnitudes.perspective_scale * desc.level, h, w))));
    case AugmentKind::erasing:
      return Image(erase(px, rng, magnitudes.erasing_area * desc.level));
    case AugmentKind::identity:
      break;
  }
  throw ValidationError("unknown augmentation kind");
}

AugmentDescriptor sample_descriptor(uint64_t rng_seed, const std::vector<AugmentKind>& allowed_kinds) {
  if (allowed_kinds.empty()) {
    throw ValidationError("allowed augmentation kinds must not be empty");
  }
  std::mt19937_64 rng(rng_seed);
  const auto index = std::uniform_int_distribution<std::size_t>(0, allowed_kinds.size() - 1)(rng);
  AugmentDescriptor desc;
  desc.kind = allowed_kinds[index];
  desc.level = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  desc.seed = rng();
  if (desc.kind == AugmentKind::identity) {
    desc.level = 0.0;
  }
  return desc;
}

std::vector<AugmentDescriptor> level_schedule(AugmentKind kind, int num_frames, double level_max,
                                              uint64_t seed) {
  if (num_frames < 2) {
    throw ValidationError("level schedule needs at least 2 frames");
  }
  if (!(level_max >= 0.0 && level_max <= 1.0)) {
    throw ValidationError("level_max must lie in [0,1]");
  }
  std::vector<AugmentDescriptor> frames;
  frames.reserve(num_frames);
  for (int i = 0; i < num_frames; ++i) {
    const double level = i == num_frames - 1
                             ? level_max
                             : level_max * static_cast<double>(i) / static_cast<double>(num_frames - 1);
    frames.push_back(AugmentDescriptor{kind, level, seed});
  }
  return frames;
}

}  // namespace mogan
