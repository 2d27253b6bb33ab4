#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "mogan/error.hpp"
#include "mogan/metrics.hpp"
#include "mogan/project.hpp"
#include "mogan/service.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Exit codes.
constexpr int kValidation = 2;
constexpr int kState = 3;
constexpr int kTraining = 4;
constexpr int kNotFound = 5;
constexpr int kIntegrity = 6;
constexpr int kOther = 1;

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mogan::ValidationError("cannot read config file " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw mogan::ValidationError("config file " + path + ": " + e.what());
  }
}

mogan::FeatureExtractor feature_extractor(const std::string& spec) {
  if (spec == "random") return mogan::FeatureExtractor::random_convnet();
  if (spec == "patches") return mogan::FeatureExtractor::raw_patches();
  if (spec.rfind("torchscript:", 0) == 0) return mogan::FeatureExtractor::torchscript(spec.substr(12));
  throw mogan::ValidationError("unknown feature extractor '" + spec + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-image GAN with ROI-preserving generation"};
  app.require_subcommand(1);
  std::string home = mogan::ProjectStore::default_root().string();
  app.add_option("--home", home, "Project store directory (default: $MOGAN_HOME or ./mogan_home)");

  // train
  auto* train = app.add_subcommand("train", "Create a project from an image and train it");
  std::string image_path;
  std::vector<std::string> roi_texts;
  std::string profile = "desk";
  std::string config_path;
  uint64_t seed = 0;
  int iters = 0;
  std::string ablation;
  bool parallel = false;
  bool quiet = false;
  train->add_option("image", image_path, "Training image")->required()->check(CLI::ExistingFile);
  train->add_option("--roi", roi_texts, "ROI box x0,y0,x1,y1 (repeatable)")->required();
  train->add_option("--profile", profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  train->add_option("--config", config_path, "JSON file with TrainConfig overrides");
  train->add_option("--seed", seed, "Training seed");
  train->add_option("--iters", iters, "Iterations per scale (overrides the profile)");
  train->add_option("--ablation", ablation, "full, minus_deformable, minus_attention, minus_injector, baseline");
  train->add_flag("--parallel", parallel, "Train branches on separate threads");
  train->add_flag("-q,--quiet", quiet, "No progress lines on stderr");

  // resume
  auto* resume = app.add_subcommand("resume", "Continue an interrupted training run from its checkpoint");
  std::string project_id;
  resume->add_option("project", project_id)->required();
  resume->add_flag("--parallel", parallel);
  resume->add_flag("-q,--quiet", quiet);

  // generate
  auto* generate = app.add_subcommand("generate", "Random samples from a trained project");
  int count = 1;
  int band_px = mogan::kDefaultBandPx;
  generate->add_option("project", project_id)->required();
  generate->add_option("-n,--count", count, "Number of samples")->check(CLI::PositiveNumber);
  generate->add_option("--seed", seed);
  generate->add_option("--band", band_px, "Fusion band width in pixels")->check(CLI::NonNegativeNumber);

  // edit
  auto* edit = app.add_subcommand("edit", "Generate from an edited copy of the source image");
  std::string edited_path;
  int min_edit_scale = 0;
  edit->add_option("project", project_id)->required();
  edit->add_option("edited", edited_path, "Edited image, same size as the source")->required()->check(CLI::ExistingFile);
  edit->add_option("--seed", seed);
  edit->add_option("--band", band_px)->check(CLI::NonNegativeNumber);
  edit->add_option("--min-scale", min_edit_scale, "Finest scale that receives the edit");

  // animate
  auto* animate = app.add_subcommand("animate", "Frames with one augmentation ramped from 0 to --level-max");
  std::string kind = "rotation";
  int frames = 8;
  double level_max = 1.0;
  double fps = 8.0;
  animate->add_option("project", project_id)->required();
  animate->add_option("--kind", kind, "Augmentation kind");
  animate->add_option("--frames", frames)->check(CLI::Range(2, 10000));
  animate->add_option("--level-max", level_max)->check(CLI::Range(0.0, 1.0));
  animate->add_option("--fps", fps)->check(CLI::PositiveNumber);
  animate->add_option("--seed", seed);
  animate->add_option("--band", band_px)->check(CLI::NonNegativeNumber);

  // eval
  auto* eval = app.add_subcommand("eval", "SIFID / diversity / GQI for whole image, ROI and background");
  int eval_samples = 100;
  std::string features = "random";
  bool markdown = false;
  eval->add_option("project", project_id)->required();
  eval->add_option("-n,--samples", eval_samples)->check(CLI::Range(2, 100000));
  eval->add_option("--seed", seed);
  eval->add_option("--features", features, "random, patches or torchscript:<path>");
  eval->add_flag("--markdown", markdown, "Print a markdown table instead of JSON");

  // status
  auto* status = app.add_subcommand("status", "Show a project");
  status->add_option("project", project_id)->required();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--host", host);
  serve->add_option("--port", port)->check(CLI::Range(0, 65535));

  CLI11_PARSE(app, argc, argv);

  try {
    mogan::ProjectStore store(home);
    auto progress_sink = std::make_shared<mogan::JsonLinesSink>(std::cerr);
    auto progress = quiet ? mogan::ProgressSink{} : progress_sink->as_sink();

    if (*train) {
      json overrides = config_path.empty() ? json::object() : read_config_file(config_path);
      overrides["profile"] = overrides.value("profile", profile);
      if (train->count("--seed")) overrides["seed"] = seed;
      if (iters > 0) overrides["iters_per_scale"] = iters;
      if (!ablation.empty()) overrides["ablation"] = ablation;

      std::vector<mogan::RoiBox> boxes;
      for (const auto& t : roi_texts) boxes.push_back(mogan::parse_box(t));
      const auto source = mogan::read_image(image_path);
      mogan::validate_boxes(boxes, source.width(), source.height());
      mogan::ProjectStore::resolve_config(overrides);

      const auto id = store.create(source);
      store.set_roi(id, boxes);
      store.begin_training(id, overrides);
      std::cout << id << std::endl;
      store.run_training(id, progress, {.parallel_branches = parallel});
      std::cout << store.checkpoint_dir(id).string() << std::endl;
    } else if (*resume) {
      store.begin_training(project_id, json::object());
      store.run_training(project_id, progress, {.parallel_branches = parallel});
      std::cout << store.checkpoint_dir(project_id).string() << std::endl;
    } else if (*generate) {
      for (const auto& r : store.generate(project_id, count, seed, band_px)) {
        std::cout << (store.project_dir(project_id) / r.output).string() << '\n';
      }
    } else if (*edit) {
      const auto r = store.edit(project_id, mogan::read_image(edited_path), seed, band_px, min_edit_scale);
      std::cout << (store.project_dir(project_id) / r.output).string() << '\n';
    } else if (*animate) {
      const auto result =
          store.animate(project_id, mogan::augment_kind_from_string(kind), frames, level_max, fps, seed, band_px);
      std::cout << (result.directory / "manifest.json").string() << '\n';
    } else if (*eval) {
      mogan::EvalOptions options;
      options.num_samples = eval_samples;
      options.seed = seed;
      const auto reports = store.metrics(project_id, options, feature_extractor(features));
      if (markdown) {
        std::cout << mogan::render_markdown(reports);
      } else {
        std::cout << json(reports).dump(2) << '\n';
      }
    } else if (*status) {
      std::cout << json(store.info(project_id)).dump(2) << '\n';
    } else if (*serve) {
      mogan::Service service(store);
      const int bound = service.bind(host, port);
      std::cerr << "listening on " << host << ":" << bound << std::endl;
      service.listen();
    }
  } catch (const mogan::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const mogan::StateError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kState;
  } catch (const mogan::TrainingError& e) {
    std::cerr << "training failed: " << e.what() << '\n';
    return kTraining;
  } catch (const mogan::NotFoundError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNotFound;
  } catch (const mogan::DigestError& e) {
    std::cerr << "checkpoint integrity: " << e.what() << '\n';
    return kIntegrity;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return 0;
}
