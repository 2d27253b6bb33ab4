#include "mogan/metrics.hpp"

#include <torch/script.h>

#include <cmath>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include "mogan/apps.hpp"
#include "mogan/digest.hpp"
#include "mogan/trainer.hpp"

namespace mogan {

namespace F = torch::nn::functional;

struct FeatureExtractor::Net {
  torch::Tensor w1, b1, w2, b2;
  std::shared_ptr<torch::jit::script::Module> script;
};

FeatureExtractor FeatureExtractor::random_convnet(uint64_t seed, int channels) {
  FeatureExtractor fx;
  fx.kind_ = FeatureKind::random_convnet;
  fx.net_ = std::make_shared<Net>();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  fx.net_->w1 = torch::randn({channels, 3, 3, 3}, gen, opts) / std::sqrt(27.0);
  fx.net_->b1 = torch::randn({channels}, gen, opts) * 0.1;
  fx.net_->w2 = torch::randn({channels, channels, 3, 3}, gen, opts) / std::sqrt(9.0 * channels);
  fx.net_->b2 = torch::randn({channels}, gen, opts) * 0.1;
  Sha256 h;
  for (const auto* t : {&fx.net_->w1, &fx.net_->b1, &fx.net_->w2, &fx.net_->b2}) {
    auto c = t->contiguous();
    h.update(c.data_ptr(), static_cast<std::size_t>(c.numel()) * sizeof(double));
  }
  fx.digest_ = h.hex();
  return fx;
}

FeatureExtractor FeatureExtractor::raw_patches(int patch) {
  if (patch < 1) throw ValidationError("patch size must be >= 1");
  FeatureExtractor fx;
  fx.kind_ = FeatureKind::raw_patches;
  fx.patch_ = patch;
  fx.digest_ = sha256_hex("raw_patches:" + std::to_string(patch));
  return fx;
}

FeatureExtractor FeatureExtractor::torchscript(const std::filesystem::path& module_path) {
  if (!std::filesystem::exists(module_path)) {
    throw NotFoundError("feature extractor module not found: " + module_path.string());
  }
  FeatureExtractor fx;
  fx.kind_ = FeatureKind::torchscript;
  fx.net_ = std::make_shared<Net>();
  try {
    fx.net_->script = std::make_shared<torch::jit::script::Module>(torch::jit::load(module_path.string()));
  } catch (const c10::Error& e) {
    throw ValidationError("cannot load feature extractor: " + std::string(e.what_without_backtrace()));
  }
  fx.net_->script->eval();
  fx.digest_ = sha256_file(module_path);
  return fx;
}

torch::Tensor FeatureExtractor::features(const Image& image) const {
  torch::NoGradGuard no_grad;
  auto x = image.batched().to(torch::kFloat64);
  torch::Tensor map;
  switch (kind_) {
    case FeatureKind::random_convnet: {
      const auto act = F::LeakyReLUFuncOptions().negative_slope(0.2);
      auto h = F::leaky_relu(torch::conv2d(x, net_->w1, net_->b1), act);
      map = F::leaky_relu(torch::conv2d(h, net_->w2, net_->b2), act);
      break;
    }
    case FeatureKind::raw_patches:
      map = F::unfold(x, F::UnfoldFuncOptions({patch_, patch_}));
      return map.squeeze(0);
    case FeatureKind::torchscript: {
      auto out = net_->script->forward({image.batched()}).toTensor();
      map = out.to(torch::kFloat64);
      break;
    }
  }
  return map.squeeze(0).reshape({map.size(1), -1});
}

FeatureStats feature_stats(const torch::Tensor& samples) {
  if (samples.dim() != 2 || samples.size(1) < 2) {
    throw ValidationError("feature statistics need at least 2 spatial samples");
  }
  auto s = samples.to(torch::kFloat64).contiguous();
  const auto c = s.size(0);
  const auto n = s.size(1);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(s.data_ptr<double>(), c, n);
  FeatureStats st;
  st.mean = m.rowwise().mean();
  Eigen::MatrixXd centered = m.colwise() - st.mean;
  st.cov = (centered * centered.transpose()) / static_cast<double>(n - 1);
  return st;
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw ValidationError("sqrtm needs a square matrix");
  const auto n = a.rows();
  if (n == 0) return a;
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd m = 0.5 * (a + a.transpose());
  Eigen::MatrixXd y = m;
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    double log_det = 0.0;
    const auto& packed = lu.matrixLU();
    for (Eigen::Index i = 0; i < n; ++i) log_det += std::log(std::abs(packed(i, i)));
    const double mu = std::exp(-log_det / (2.0 * static_cast<double>(n)));
    const Eigen::MatrixXd m_inv = lu.inverse();
    y = 0.5 * mu * y * (id + m_inv / (mu * mu));
    m = 0.5 * (id + 0.5 * (mu * mu * m + m_inv / (mu * mu)));
    if (!m.allFinite() || !y.allFinite()) {
      throw Error("matrix square root diverged (matrix not positive definite?)");
    }
    if ((m - id).norm() < 1e-13 * std::sqrt(static_cast<double>(n))) break;
  }
  return 0.5 * (y + y.transpose());
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size()) throw ValidationError("feature dimensionality mismatch");
  const Eigen::MatrixXd s1 = sqrtm_psd(a.cov);
  const Eigen::MatrixXd cross = sqrtm_psd(s1 * b.cov * s1);
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

double sifid(const Image& real, const Image& fake, const FeatureExtractor& fx) {
  auto sa = feature_stats(fx.features(real));
  auto sb = feature_stats(fx.features(fake));
  const auto c = sa.cov.rows();
  sa.cov += 1e-6 * Eigen::MatrixXd::Identity(c, c);
  sb.cov += 1e-6 * Eigen::MatrixXd::Identity(c, c);
  return frechet_distance(sa, sb);
}

double diversity(const std::vector<Image>& samples, const torch::Tensor& mask) {
  if (samples.size() < 2) throw ValidationError("diversity needs at least 2 samples");
  std::vector<torch::Tensor> stack;
  for (const auto& s : samples) {
    if (s.height() != samples[0].height() || s.width() != samples[0].width()) {
      throw ValidationError("diversity samples must share dimensions");
    }
    stack.push_back(s.tensor().to(torch::kFloat64));
  }
  auto all = torch::stack(stack);  // S x 3 x H x W
  auto mean = all.mean(0);
  auto std = (all - mean).pow(2).mean(0).sqrt();
  auto cv = torch::where(mean == 0, torch::zeros_like(mean), std / mean);
  if (!mask.defined()) return cv.mean().item<double>();
  auto m = mask.reshape({1, samples[0].height(), samples[0].width()}).to(torch::kFloat64).expand_as(cv);
  const double count = m.sum().item<double>();
  if (count == 0.0) throw ValidationError("diversity mask hides every pixel");
  return (cv * m).sum().item<double>() / count;
}

double gqi(double sifid_value, double diversity_value) {
  if (sifid_value < 0) throw ValidationError("sifid must be >= 0");
  if (sifid_value == 0.0) {
    std::cerr << "warning: SIFID is 0 (samples reproduce the target); GQI reported as infinite\n";
    return std::numeric_limits<double>::infinity();
  }
  return diversity_value / sifid_value;
}

std::string_view to_string(EvalTarget target) {
  switch (target) {
    case EvalTarget::whole: return "whole";
    case EvalTarget::roi_only: return "roi_only";
    case EvalTarget::background_only: return "background_only";
  }
  return "unknown";
}

EvalTarget eval_target_from_string(std::string_view name) {
  if (name == "whole") return EvalTarget::whole;
  if (name == "roi_only" || name == "roi") return EvalTarget::roi_only;
  if (name == "background_only" || name == "background") return EvalTarget::background_only;
  throw ValidationError("unknown evaluation target: " + std::string(name));
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"target", std::string(to_string(r.target))},
                     {"sifid", r.sifid},
                     {"diversity", r.diversity},
                     {"gqi", std::isfinite(r.gqi) ? nlohmann::json(r.gqi) : nlohmann::json("inf")},
                     {"sample_count", r.sample_count}};
  if (!r.warning.empty()) j["warning"] = r.warning;
}

std::string render_markdown(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "| Metrics |";
  for (const auto& r : reports) out << ' ' << to_string(r.target) << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < reports.size(); ++i) out << "---|";
  out << '\n';
  auto row = [&](const char* name, auto field) {
    out << "| " << name << " |";
    for (const auto& r : reports) out << ' ' << field(r) << " |";
    out << '\n';
  };
  row("SIFID", [](const MetricsReport& r) { return r.sifid; });
  row("Diversity", [](const MetricsReport& r) { return r.diversity; });
  row("GQI", [](const MetricsReport& r) { return r.gqi; });
  return out.str();
}

std::vector<MetricsReport> evaluate_model(const Model& model, const EvalOptions& options,
                                          const FeatureExtractor& fx) {
  if (!model.fully_trained()) throw StateError("evaluation needs a trained model");
  if (options.num_samples < 2) throw ValidationError("evaluation needs at least 2 samples");

  std::vector<Sample> samples;
  for (int i = 0; i < options.num_samples; ++i) {
    samples.push_back(generate_sample(model, options.seed + static_cast<uint64_t>(i), options.band_px));
  }

  auto finish = [](MetricsReport r) {
    if (r.sifid == 0.0) r.warning = "sifid is zero; gqi reported as infinite";
    r.gqi = gqi(r.sifid, r.diversity);
    return r;
  };

  std::vector<MetricsReport> reports;
  for (const auto target : options.targets) {
    MetricsReport r;
    r.target = target;
    r.sample_count = options.num_samples;
    switch (target) {
      case EvalTarget::whole: {
        std::vector<Image> fused;
        double total = 0;
        for (const auto& s : samples) {
          total += sifid(model.source, s.image, fx);
          fused.push_back(s.image);
        }
        r.sifid = total / static_cast<double>(samples.size());
        r.diversity = diversity(fused);
        break;
      }
      case EvalTarget::roi_only: {
        if (model.roi.empty()) throw ValidationError("roi_only evaluation needs at least one roi box");
        double sifid_total = 0, div_total = 0;
        for (std::size_t k = 0; k < model.roi.size(); ++k) {
          std::vector<Image> crops;
          for (const auto& s : samples) {
            sifid_total += sifid(model.roi[k].pyramid[0], s.roi_images[k], fx);
            crops.push_back(s.roi_images[k]);
          }
          div_total += diversity(crops);
        }
        r.sifid = sifid_total / static_cast<double>(samples.size() * model.roi.size());
        r.diversity = div_total / static_cast<double>(model.roi.size());
        break;
      }
      case EvalTarget::background_only: {
        const auto mask = model.background.masks[0].squeeze(0);
        const Image real = mask_background(model.source, model.boxes).image;
        std::vector<Image> fakes;
        double total = 0;
        for (const auto& s : samples) {
          Image fake = mask_background(s.background, model.boxes).image;
          total += sifid(real, fake, fx);
          fakes.push_back(fake);
        }
        r.sifid = total / static_cast<double>(samples.size());
        r.diversity = diversity(fakes, mask);
        break;
      }
    }
    reports.push_back(finish(r));
  }
  return reports;
}

}  // namespace mogan
