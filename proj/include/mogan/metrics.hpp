#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mogan/imaging.hpp"

namespace mogan {

struct Model;

enum class FeatureKind { random_convnet, raw_patches, torchscript };

/// Maps an image to a CxN matrix of per-position feature vectors.
class FeatureExtractor {
 public:
  /// Two valid 3x3 convolutions with fixed seeded weights and LeakyReLU.
  static FeatureExtractor random_convnet(uint64_t seed = 1234, int channels = 32);
  /// Raw RGB patches, 3*patch^2 features per position.
  static FeatureExtractor raw_patches(int patch = 3);
  /// TorchScript module returning a 1xCxH'xW' map (e.g. early Inception layers).
  static FeatureExtractor torchscript(const std::filesystem::path& module_path);

  /// Double-precision CxN features.
  torch::Tensor features(const Image& image) const;

  FeatureKind kind() const { return kind_; }
  const std::string& digest() const { return digest_; }

 private:
  struct Net;
  FeatureKind kind_ = FeatureKind::random_convnet;
  std::shared_ptr<Net> net_;
  int patch_ = 3;
  std::string digest_;
};

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Mean and unbiased covariance of CxN samples (N >= 2).
FeatureStats feature_stats(const torch::Tensor& samples);

/// Square root of a symmetric positive-definite matrix via the scaled
/// product-form Denman-Beavers iteration.
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& a);

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), floored at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Frechet distance between the per-position feature statistics of two images.
/// Covariances get +1e-6 I before the square root.
double sifid(const Image& real, const Image& fake, const FeatureExtractor& fx);

/// Mean over pixels and channels of the per-pixel coefficient of variation
/// (population std / mean) across samples; zero-mean pixels count as 0.
/// With a 1xHxW mask only mask = 1 pixels are averaged.
double diversity(const std::vector<Image>& samples, const torch::Tensor& mask = {});

/// diversity / sifid; +inf (with a warning on stderr) when sifid is 0.
double gqi(double sifid, double diversity);

enum class EvalTarget { whole, roi_only, background_only };

std::string_view to_string(EvalTarget target);
EvalTarget eval_target_from_string(std::string_view name);

struct MetricsReport {
  EvalTarget target = EvalTarget::whole;
  double sifid = 0;
  double diversity = 0;
  double gqi = 0;
  int sample_count = 0;
  std::string warning;
};

void to_json(nlohmann::json& j, const MetricsReport& r);

/// Markdown table with one column per target, rows SIFID / Diversity / GQI.
std::string render_markdown(const std::vector<MetricsReport>& reports);

struct EvalOptions {
  int num_samples = 100;
  uint64_t seed = 0;
  int band_px = 3;
  std::vector<EvalTarget> targets{EvalTarget::whole, EvalTarget::roi_only, EvalTarget::background_only};
};

/// Generates `num_samples` samples per target from a trained model and scores
/// them. ROI-only compares crops with their ROI targets; background-only masks
/// the ROI boxes out of both real and fake images before feature extraction.
std::vector<MetricsReport> evaluate_model(const Model& model, const EvalOptions& options,
                                          const FeatureExtractor& fx = FeatureExtractor::random_convnet());

}  // namespace mogan
