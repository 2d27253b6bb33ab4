#include "mogan/project.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "mogan/error.hpp"

namespace mogan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(ProjectStatus status) {
  switch (status) {
    case ProjectStatus::created: return "created";
    case ProjectStatus::training: return "training";
    case ProjectStatus::trained: return "trained";
    case ProjectStatus::failed: return "failed";
  }
  return "unknown";
}

ProjectStatus project_status_from_string(std::string_view name) {
  if (name == "created") return ProjectStatus::created;
  if (name == "training") return ProjectStatus::training;
  if (name == "trained") return ProjectStatus::trained;
  if (name == "failed") return ProjectStatus::failed;
  throw ValidationError("unknown project status: " + std::string(name));
}

bool status_transition_allowed(ProjectStatus from, ProjectStatus to) {
  switch (from) {
    case ProjectStatus::created: return to == ProjectStatus::training;
    case ProjectStatus::training: return to == ProjectStatus::trained || to == ProjectStatus::failed;
    default: return false;
  }
}

json boxes_to_json(const std::vector<RoiBox>& boxes) {
  json out = json::array();
  for (const auto& b : boxes) out.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
  return out;
}

std::vector<RoiBox> boxes_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("boxes must be an array");
  std::vector<RoiBox> boxes;
  try {
    for (const auto& b : j) {
      if (b.is_array()) {
        if (b.size() != 4) throw ValidationError("a box needs exactly 4 coordinates");
        boxes.push_back({b[0].get<int64_t>(), b[1].get<int64_t>(), b[2].get<int64_t>(), b[3].get<int64_t>()});
      } else {
        boxes.push_back({b.at("x_min").get<int64_t>(), b.at("y_min").get<int64_t>(), b.at("x_max").get<int64_t>(),
                         b.at("y_max").get<int64_t>()});
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed box: ") + e.what());
  }
  return boxes;
}

RoiBox parse_box(std::string_view text) {
  int64_t v[4];
  const char* p = text.data();
  const char* end = text.data() + text.size();
  for (int i = 0; i < 4; ++i) {
    auto [next, ec] = std::from_chars(p, end, v[i]);
    if (ec != std::errc{}) throw ValidationError("malformed box '" + std::string(text) + "', expected x0,y0,x1,y1");
    p = next;
    if (i < 3) {
      if (p == end || *p != ',') throw ValidationError("malformed box '" + std::string(text) + "', expected x0,y0,x1,y1");
      ++p;
    }
  }
  if (p != end) throw ValidationError("malformed box '" + std::string(text) + "', expected x0,y0,x1,y1");
  return {v[0], v[1], v[2], v[3]};
}

void to_json(json& j, const ProjectInfo& p) {
  j = json{{"id", p.id},
           {"status", std::string(to_string(p.status))},
           {"width", p.width},
           {"height", p.height},
           {"boxes", boxes_to_json(p.boxes)},
           {"train_overrides", p.train_overrides},
           {"error", p.error},
           {"next_sample", p.next_sample}};
}

void from_json(const json& j, ProjectInfo& p) {
  p.id = j.at("id").get<std::string>();
  p.status = project_status_from_string(j.at("status").get<std::string>());
  p.width = j.at("width").get<int64_t>();
  p.height = j.at("height").get<int64_t>();
  p.boxes = boxes_from_json(j.at("boxes"));
  p.train_overrides = j.value("train_overrides", json::object());
  p.error = j.value("error", "");
  p.next_sample = j.value("next_sample", 0);
}

namespace {

void write_text_atomic(const fs::path& path, const std::string& text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("missing " + path.string());
  return json::parse(in);
}

bool valid_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  for (char c : id) {
    if (!std::isalnum(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

std::string random_id() {
  std::random_device rd;
  std::ostringstream s;
  s << std::hex << std::setfill('0') << std::setw(8) << rd() << std::setw(4) << (rd() & 0xffff);
  return s.str();
}

std::string sample_id(const std::string& project, int seq) {
  std::ostringstream s;
  s << project << '-' << std::setfill('0') << std::setw(6) << seq;
  return s.str();
}

}  // namespace

ProjectStore::ProjectStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_ / "projects"); }

fs::path ProjectStore::default_root() {
  if (const char* home = std::getenv("MOGAN_HOME"); home && *home) return home;
  return fs::current_path() / "mogan_home";
}

ProjectStore::Entry& ProjectStore::entry(const std::string& id) const {
  std::lock_guard lock(entries_mutex_);
  auto& slot = entries_[id];
  if (!slot) slot = std::make_unique<Entry>();
  return *slot;
}

fs::path ProjectStore::project_dir(const std::string& id) const {
  if (!valid_id(id)) throw NotFoundError("unknown project " + id);
  return root_ / "projects" / id;
}
fs::path ProjectStore::checkpoint_dir(const std::string& id) const { return project_dir(id) / "checkpoint"; }
fs::path ProjectStore::samples_dir(const std::string& id) const { return project_dir(id) / "samples"; }

bool ProjectStore::exists(const std::string& id) const {
  return valid_id(id) && fs::exists(root_ / "projects" / id / "project.json");
}

ProjectInfo ProjectStore::read_info(const std::string& id) const {
  if (!exists(id)) throw NotFoundError("unknown project " + id);
  return read_json(project_dir(id) / "project.json").get<ProjectInfo>();
}

void ProjectStore::write_info(const ProjectInfo& info) const {
  write_text_atomic(project_dir(info.id) / "project.json", json(info).dump(2));
  write_text_atomic(project_dir(info.id) / "roi.json", boxes_to_json(info.boxes).dump());
}

void ProjectStore::set_status(ProjectInfo& info, ProjectStatus to, std::string error) const {
  if (!status_transition_allowed(info.status, to)) {
    throw StateError("project " + info.id + " cannot go from " + std::string(to_string(info.status)) + " to " +
                     std::string(to_string(to)));
  }
  info.status = to;
  info.error = std::move(error);
  write_info(info);
}

ProjectInfo ProjectStore::info(const std::string& id) const {
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  return read_info(id);
}

std::vector<std::string> ProjectStore::list() const {
  std::vector<std::string> ids;
  for (const auto& d : fs::directory_iterator(root_ / "projects")) {
    const auto id = d.path().filename().string();
    if (exists(id)) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::string ProjectStore::create(const Image& source) {
  std::string id;
  do {
    id = random_id();
  } while (fs::exists(root_ / "projects" / id));
  fs::create_directories(samples_dir(id));
  write_png(source, project_dir(id) / "source.png");
  ProjectInfo info;
  info.id = id;
  info.width = source.width();
  info.height = source.height();
  write_info(info);
  return id;
}

void ProjectStore::set_roi(const std::string& id, const std::vector<RoiBox>& boxes) {
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  auto info = read_info(id);
  if (info.status != ProjectStatus::created) {
    throw StateError("project " + id + " is " + std::string(to_string(info.status)) + "; boxes are fixed");
  }
  validate_boxes(boxes, info.width, info.height);
  info.boxes = boxes;
  write_info(info);
}

Image ProjectStore::source(const std::string& id) const {
  if (!exists(id)) throw NotFoundError("unknown project " + id);
  return read_image(project_dir(id) / "source.png");
}

TrainConfig ProjectStore::resolve_config(const json& overrides) {
  if (!overrides.is_object()) throw ValidationError("training configuration must be a JSON object");
  TrainConfig config;
  try {
    apply_overrides(config, overrides);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad training configuration: ") + e.what());
  }
  config.validate();
  return config;
}

void ProjectStore::begin_training(const std::string& id, const json& overrides) {
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  auto info = read_info(id);
  if (info.status == ProjectStatus::training) return;  // resume
  if (info.status != ProjectStatus::created) {
    throw StateError("project " + id + " is already " + std::string(to_string(info.status)));
  }
  if (info.boxes.empty()) throw ValidationError("project " + id + " has no roi boxes");
  resolve_config(overrides);
  info.train_overrides = overrides;
  set_status(info, ProjectStatus::training);
}

TrainStats ProjectStore::run_training(const std::string& id, const ProgressSink& progress,
                                      const ModelTrainOptions& options) {
  auto& e = entry(id);
  ProjectInfo info;
  {
    std::lock_guard lock(e.mutex);
    info = read_info(id);
  }
  if (info.status != ProjectStatus::training) {
    throw StateError("project " + id + " is " + std::string(to_string(info.status)) + ", not training");
  }

  auto fail = [&](const std::string& message) {
    std::lock_guard lock(e.mutex);
    auto current = read_info(id);
    set_status(current, ProjectStatus::failed, message);
  };

  try {
    const auto ckpt = checkpoint_dir(id);
    Model model = fs::exists(ckpt / "manifest.json")
                      ? load_checkpoint(ckpt)
                      : make_model(source(id), info.boxes, resolve_config(info.train_overrides));
    auto opts = options;
    opts.checkpoint_dir = ckpt;
    auto stats = train_model(model, progress, opts);
    save_checkpoint(model, ckpt);
    std::lock_guard lock(e.mutex);
    auto current = read_info(id);
    set_status(current, ProjectStatus::trained);
    e.model = std::make_shared<const Model>(std::move(model));
    return stats;
  } catch (const std::exception& ex) {
    fail(ex.what());
    throw;
  }
}

void ProjectStore::require_trained(const ProjectInfo& info) const {
  if (info.status != ProjectStatus::trained) {
    throw StateError("project " + info.id + " is " + std::string(to_string(info.status)) + ", not trained");
  }
}

std::shared_ptr<const Model> ProjectStore::model(const std::string& id) const {
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  require_trained(read_info(id));
  if (!e.model) e.model = std::make_shared<const Model>(load_checkpoint(checkpoint_dir(id)));
  return e.model;
}

SampleRecord ProjectStore::store_sample(ProjectInfo& info, Sample& sample, const fs::path& dir) const {
  auto& r = sample.record;
  r.id = sample_id(info.id, info.next_sample++);
  r.project_id = info.id;
  const auto file = dir / (r.id + ".png");
  write_png(sample.image, file);
  r.output = fs::relative(file, project_dir(info.id)).generic_string();
  write_text_atomic(samples_dir(info.id) / (r.id + ".json"), json(r).dump(2));
  write_info(info);
  return r;
}

std::vector<SampleRecord> ProjectStore::generate(const std::string& id, int count, uint64_t seed, int band_px) {
  auto m = model(id);
  auto samples = generate_samples(*m, count, seed, band_px);
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  auto info = read_info(id);
  std::vector<SampleRecord> out;
  for (auto& s : samples) out.push_back(store_sample(info, s, samples_dir(id)));
  return out;
}

SampleRecord ProjectStore::edit(const std::string& id, const Image& edited, uint64_t seed, int band_px,
                                int min_edit_scale) {
  auto m = model(id);
  auto s = edit_sample(*m, edited, seed, band_px, min_edit_scale);
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  auto info = read_info(id);
  const auto input = sample_id(id, info.next_sample) + "_input.png";
  write_png(edited, samples_dir(id) / input);
  s.record.edit_input = input;
  return store_sample(info, s, samples_dir(id));
}

AnimationResult ProjectStore::animate(const std::string& id, AugmentKind kind, int frames, double level_max,
                                      double fps, uint64_t seed, int band_px) {
  if (!(fps > 0)) throw ValidationError("fps must be > 0");
  auto m = model(id);
  auto samples = mogan::animate(*m, kind, frames, level_max, seed, band_px);
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  auto info = read_info(id);
  AnimationResult result;
  result.fps = fps;
  result.directory = samples_dir(id) / ("animation_" + sample_id(id, info.next_sample));
  fs::create_directories(result.directory);
  json manifest{{"fps", fps},
                {"kind", std::string(to_string(kind))},
                {"level_max", level_max},
                {"seed", seed},
                {"frames", json::array()}};
  for (std::size_t f = 0; f < samples.size(); ++f) {
    auto r = store_sample(info, samples[f], result.directory);
    std::ostringstream name;
    name << "frame_" << std::setfill('0') << std::setw(3) << f << ".png";
    fs::rename(project_dir(id) / r.output, result.directory / name.str());
    r.output = fs::relative(result.directory / name.str(), project_dir(id)).generic_string();
    write_text_atomic(samples_dir(id) / (r.id + ".json"), json(r).dump(2));
    manifest["frames"].push_back({{"file", name.str()}, {"sample_id", r.id}, {"level", r.augment.at(0).level}});
    result.frames.push_back(r);
  }
  write_text_atomic(result.directory / "manifest.json", manifest.dump(2));
  return result;
}

namespace {

std::string project_of(const std::string& sample_id) {
  const auto dash = sample_id.find('-');
  if (dash == std::string::npos) throw NotFoundError("unknown sample " + sample_id);
  return sample_id.substr(0, dash);
}

}  // namespace

SampleRecord ProjectStore::sample(const std::string& sample_id) const {
  const auto project = project_of(sample_id);
  const auto suffix = sample_id.substr(project.size() + 1);
  if (!exists(project) || suffix.empty() ||
      !std::all_of(suffix.begin(), suffix.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw NotFoundError("unknown sample " + sample_id);
  }
  const auto path = samples_dir(project) / (sample_id + ".json");
  if (!fs::exists(path)) throw NotFoundError("unknown sample " + sample_id);
  return read_json(path).get<SampleRecord>();
}

fs::path ProjectStore::sample_path(const std::string& sample_id) const {
  const auto r = sample(sample_id);
  return project_dir(r.project_id) / r.output;
}

Sample ProjectStore::regenerate_sample(const std::string& sample_id) const {
  const auto r = sample(sample_id);
  auto m = model(r.project_id);
  std::optional<Image> edited;
  if (r.kind == SampleKind::edit) edited = read_image(samples_dir(r.project_id) / r.edit_input);
  return regenerate(*m, r, edited);
}

std::vector<MetricsReport> ProjectStore::metrics(const std::string& id, const EvalOptions& options,
                                                 const FeatureExtractor& fx) {
  auto m = model(id);
  auto reports = evaluate_model(*m, options, fx);
  json out{{"num_samples", options.num_samples}, {"seed", options.seed}, {"reports", reports}};
  auto& e = entry(id);
  std::lock_guard lock(e.mutex);
  write_text_atomic(project_dir(id) / "metrics.json", out.dump(2));
  return reports;
}

}  // namespace mogan
