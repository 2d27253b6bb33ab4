#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mogan/apps.hpp"
#include "mogan/imaging.hpp"
#include "mogan/metrics.hpp"
#include "mogan/trainer.hpp"

namespace mogan {

enum class ProjectStatus { created, training, trained, failed };

std::string_view to_string(ProjectStatus status);
ProjectStatus project_status_from_string(std::string_view name);

/// Allowed: created -> training -> {trained, failed}.
bool status_transition_allowed(ProjectStatus from, ProjectStatus to);

struct ProjectInfo {
  std::string id;
  ProjectStatus status = ProjectStatus::created;
  int64_t width = 0;
  int64_t height = 0;
  std::vector<RoiBox> boxes;
  /// Overrides given to the last train request (profile name and/or TrainConfig keys).
  nlohmann::json train_overrides = nlohmann::json::object();
  std::string error;
  int next_sample = 0;
};

void to_json(nlohmann::json& j, const ProjectInfo& p);
void from_json(const nlohmann::json& j, ProjectInfo& p);

nlohmann::json boxes_to_json(const std::vector<RoiBox>& boxes);
/// Accepts [[x0,y0,x1,y1], ...] or [{"x_min":..,"y_min":..,"x_max":..,"y_max":..}, ...].
std::vector<RoiBox> boxes_from_json(const nlohmann::json& j);
/// "x0,y0,x1,y1"
RoiBox parse_box(std::string_view text);

struct AnimationResult {
  double fps = 0;
  std::filesystem::path directory;
  std::vector<SampleRecord> frames;
};

/// File-backed projects under `root`:
///   projects/<id>/{project.json, source.png, roi.json, progress.jsonl, checkpoint/, samples/}
/// Calls on the same project are serialised; different projects run concurrently.
class ProjectStore {
 public:
  explicit ProjectStore(std::filesystem::path root);

  /// MOGAN_HOME, or ./mogan_home when unset.
  static std::filesystem::path default_root();

  const std::filesystem::path& root() const { return root_; }

  std::string create(const Image& source);
  bool exists(const std::string& id) const;
  ProjectInfo info(const std::string& id) const;
  std::vector<std::string> list() const;

  /// Only while the project is still `created`.
  void set_roi(const std::string& id, const std::vector<RoiBox>& boxes);

  Image source(const std::string& id) const;
  std::filesystem::path project_dir(const std::string& id) const;
  std::filesystem::path checkpoint_dir(const std::string& id) const;
  std::filesystem::path samples_dir(const std::string& id) const;

  /// Resolves the overrides into a full configuration and validates it.
  static TrainConfig resolve_config(const nlohmann::json& overrides);

  /// Moves created -> training and records the overrides. A project already in
  /// `training` with no live job resumes from its checkpoint with the stored
  /// configuration; `overrides` is then ignored.
  void begin_training(const std::string& id, const nlohmann::json& overrides);

  /// Runs training for a project in the `training` state, checkpointing after
  /// every scale, and moves it to trained or failed. Rethrows failures.
  TrainStats run_training(const std::string& id, const ProgressSink& progress = {},
                          const ModelTrainOptions& options = {});

  /// Loads the trained model (cached after the first load).
  std::shared_ptr<const Model> model(const std::string& id) const;

  std::vector<SampleRecord> generate(const std::string& id, int count, uint64_t seed, int band_px = kDefaultBandPx);
  SampleRecord edit(const std::string& id, const Image& edited, uint64_t seed, int band_px = kDefaultBandPx,
                    int min_edit_scale = 0);
  AnimationResult animate(const std::string& id, AugmentKind kind, int frames, double level_max, double fps,
                          uint64_t seed, int band_px = kDefaultBandPx);

  /// Sample ids are "<project id>-<sequence>".
  SampleRecord sample(const std::string& sample_id) const;
  std::filesystem::path sample_path(const std::string& sample_id) const;
  /// Regenerates the sample from its record and the checkpoint.
  Sample regenerate_sample(const std::string& sample_id) const;

  std::vector<MetricsReport> metrics(const std::string& id, const EvalOptions& options,
                                     const FeatureExtractor& fx = FeatureExtractor::random_convnet());

 private:
  struct Entry {
    std::mutex mutex;
    std::shared_ptr<const Model> model;
  };

  Entry& entry(const std::string& id) const;
  ProjectInfo read_info(const std::string& id) const;
  void write_info(const ProjectInfo& info) const;
  void set_status(ProjectInfo& info, ProjectStatus to, std::string error = {}) const;
  void require_trained(const ProjectInfo& info) const;
  SampleRecord store_sample(ProjectInfo& info, Sample& sample, const std::filesystem::path& dir) const;

  std::filesystem::path root_;
  mutable std::mutex entries_mutex_;
  mutable std::map<std::string, std::unique_ptr<Entry>> entries_;
};

}  // namespace mogan
