#include <gtest/gtest.h>

#include <fstream>

#include "mogan/apps.hpp"
#include "mogan/project.hpp"
#include "support.hpp"

using namespace mogan;
using mogan::testing::pattern_image;
using mogan::testing::TempDir;
using mogan::testing::tiny_box;
using mogan::testing::tiny_config;
using mogan::testing::tiny_trained_model;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Store with one trained tiny project; shared by the tests below.
struct TrainedStore {
  TempDir dir;
  ProjectStore store{dir.path()};
  std::string id;

  TrainedStore() {
    id = store.create(pattern_image(40, 40));
    store.set_roi(id, {tiny_box()});
    store.begin_training(id, nlohmann::json(tiny_config(2)));
    store.run_training(id);
  }
};

TrainedStore& trained_store() {
  static TrainedStore s;
  return s;
}

}  // namespace

TEST(Samples, CountDimsAndSeeds) {
  const auto& model = tiny_trained_model();
  const auto samples = generate_samples(model, 4, 100);
  ASSERT_EQ(samples.size(), 4u);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(samples[i].image.height(), model.source.height());
    EXPECT_EQ(samples[i].image.width(), model.source.width());
    EXPECT_EQ(samples[i].record.seed, 100 + i);
    EXPECT_EQ(samples[i].record.augment.size(), model.boxes.size());
  }
  EXPECT_TRUE(generate_sample(model, 100).image.equals(samples[0].image));
  EXPECT_FALSE(samples[0].image.equals(samples[1].image));
  EXPECT_THROW(generate_samples(model, 0, 1), ValidationError);
}

TEST(Samples, RegenerateIsBitExact) {
  const auto& model = tiny_trained_model();
  const auto s = generate_sample(model, 77);
  const nlohmann::json j = s.record;
  const auto back = j.get<SampleRecord>();
  EXPECT_TRUE(regenerate(model, back).image.equals(s.image));
}

TEST(Samples, NoiseSeedsDifferPerBranch) {
  EXPECT_NE(sample_noise_seed(5, 0), sample_noise_seed(5, 1));
  EXPECT_NE(sample_noise_seed(5, 0), sample_noise_seed(5, -1));
  EXPECT_EQ(sample_noise_seed(5, 0), sample_noise_seed(5, 0));
}

TEST(Edit, ChangesRoiKeepsParametersAndValidatesSize) {
  const auto& model = tiny_trained_model();
  const auto before = model.digest();
  auto edited_t = model.source.tensor().clone();
  const auto b = tiny_box();
  edited_t.slice(1, b.y_min + 5, b.y_min + 20).slice(2, b.x_min + 5, b.x_min + 20).fill_(1.0f);
  const Image edited(edited_t);
  const auto plain = edit_sample(model, model.source, 9);
  const auto changed = edit_sample(model, edited, 9);
  EXPECT_EQ(model.digest(), before);
  const auto roi_plain = crop_roi(plain.image, b);
  const auto roi_changed = crop_roi(changed.image, b);
  EXPECT_GT(mean_abs_diff(roi_plain, roi_changed), 0.0);
  EXPECT_EQ(changed.record.kind, SampleKind::edit);
  EXPECT_TRUE(regenerate(model, changed.record, edited).image.equals(changed.image));
  EXPECT_THROW(edit_sample(model, pattern_image(30, 40), 9), ValidationError);
  EXPECT_THROW(regenerate(model, changed.record), ValidationError);
}

TEST(Animate, StartsAtIdentityAndIsSmooth) {
  const auto& model = tiny_trained_model();
  const auto frames = animate(model, AugmentKind::rotation, 8, 1.0, 12);
  ASSERT_EQ(frames.size(), 8u);
  // Frame 0 is the identity-augmented sample with the same noise.
  const auto identity = compose_sample(model, 12, {AugmentDescriptor{}}, kDefaultBandPx);
  EXPECT_TRUE(frames[0].image.equals(identity.image));
  double worst = 0;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    worst = std::max(worst, mean_abs_diff(frames[i - 1].image, frames[i].image));
    EXPECT_EQ(frames[i].record.frame, static_cast<int>(i));
  }
  EXPECT_LT(worst, mean_abs_diff(frames.front().image, frames.back().image));
  const auto again = animate(model, AugmentKind::rotation, 8, 1.0, 12);
  for (std::size_t i = 0; i < frames.size(); ++i) EXPECT_TRUE(again[i].image.equals(frames[i].image));
  EXPECT_THROW(animate(model, AugmentKind::rotation, 1, 1.0, 12), ValidationError);
}

TEST(ProjectStatus, Transitions) {
  using S = ProjectStatus;
  EXPECT_TRUE(status_transition_allowed(S::created, S::training));
  EXPECT_TRUE(status_transition_allowed(S::training, S::trained));
  EXPECT_TRUE(status_transition_allowed(S::training, S::failed));
  EXPECT_FALSE(status_transition_allowed(S::created, S::trained));
  EXPECT_FALSE(status_transition_allowed(S::trained, S::training));
  EXPECT_FALSE(status_transition_allowed(S::failed, S::training));
  for (auto s : {S::created, S::training, S::trained, S::failed}) {
    EXPECT_EQ(project_status_from_string(to_string(s)), s);
  }
}

TEST(Boxes, ParseAndJson) {
  EXPECT_EQ(parse_box("1,2,30,40"), (RoiBox{1, 2, 30, 40}));
  EXPECT_THROW(parse_box("1,2,3"), ValidationError);
  EXPECT_THROW(parse_box("a,b,c,d"), ValidationError);
  const std::vector<RoiBox> boxes{{1, 2, 3, 4}, {5, 6, 7, 8}};
  EXPECT_EQ(boxes_from_json(boxes_to_json(boxes)), boxes);
  const auto objects = nlohmann::json::parse(R"([{"x_min":1,"y_min":2,"x_max":3,"y_max":4}])");
  EXPECT_EQ(boxes_from_json(objects), std::vector<RoiBox>{boxes[0]});
}

TEST(ProjectStore, LifecycleGuards) {
  TempDir dir;
  ProjectStore store(dir.path());
  const auto id = store.create(pattern_image(40, 40));
  EXPECT_TRUE(store.exists(id));
  EXPECT_EQ(store.list(), std::vector<std::string>{id});
  EXPECT_EQ(store.info(id).status, ProjectStatus::created);
  EXPECT_TRUE(store.source(id).equals(read_image(store.project_dir(id) / "source.png")));

  EXPECT_THROW(store.begin_training(id, nlohmann::json(tiny_config(1))), ValidationError);  // no boxes yet
  EXPECT_THROW(store.set_roi(id, {{0, 0, 50, 10}}), ValidationError);
  store.set_roi(id, {tiny_box()});
  EXPECT_THROW(store.generate(id, 1, 0), StateError);
  EXPECT_THROW(store.begin_training(id, {{"lr", -1}}), ValidationError);
  EXPECT_EQ(store.info(id).status, ProjectStatus::created);
  EXPECT_THROW(store.info("missing"), NotFoundError);
  EXPECT_THROW(store.sample("missing-000001"), NotFoundError);
}

TEST(ProjectStore, TrainGenerateAndRegenerate) {
  auto& ts = trained_store();
  auto& store = ts.store;
  EXPECT_EQ(store.info(ts.id).status, ProjectStatus::trained);
  EXPECT_TRUE(fs::exists(store.checkpoint_dir(ts.id) / "manifest.json"));
  EXPECT_THROW(store.set_roi(ts.id, {tiny_box()}), StateError);
  EXPECT_THROW(store.begin_training(ts.id, nlohmann::json::object()), StateError);

  const auto recs = store.generate(ts.id, 2, 31);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_NE(recs[0].id, recs[1].id);
  EXPECT_EQ(recs[0].id.rfind(ts.id + "-", 0), 0u);
  EXPECT_EQ(store.sample(recs[0].id).seed, 31u);
  const auto again = store.generate(ts.id, 2, 31);
  EXPECT_EQ(read_bytes(store.sample_path(recs[0].id)), read_bytes(store.sample_path(again[0].id)));
  const auto regen = store.regenerate_sample(recs[1].id);
  // Stored PNGs are 8-bit.
  const auto stored = read_image(store.sample_path(recs[1].id));
  EXPECT_LE((regen.image.tensor() - stored.tensor()).abs().max().item<double>(), 0.5 / 255 + 1e-6);
}

TEST(ProjectStore, CheckpointMatchesInMemoryModel) {
  auto& ts = trained_store();
  const auto model = ts.store.model(ts.id);
  const auto reloaded = load_checkpoint(ts.store.checkpoint_dir(ts.id));
  EXPECT_EQ(reloaded.digest(), model->digest());
}

TEST(ProjectStore, EditAndAnimateArtifacts) {
  auto& ts = trained_store();
  auto& store = ts.store;
  const auto rec = store.edit(ts.id, store.source(ts.id), 4);
  EXPECT_EQ(rec.kind, SampleKind::edit);
  EXPECT_TRUE(fs::exists(store.sample_path(rec.id)));
  EXPECT_THROW(store.edit(ts.id, pattern_image(10, 10), 4), ValidationError);

  const auto anim = store.animate(ts.id, AugmentKind::affine, 4, 0.8, 12.0, 2);
  EXPECT_EQ(anim.frames.size(), 4u);
  EXPECT_EQ(anim.fps, 12.0);
  std::ifstream in(anim.directory / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  EXPECT_EQ(manifest["frames"].size(), 4u);
  for (const auto& f : manifest["frames"]) EXPECT_TRUE(fs::exists(anim.directory / f["file"].get<std::string>()));
  EXPECT_THROW(store.animate(ts.id, AugmentKind::affine, 4, 0.8, 0.0, 2), ValidationError);
}

TEST(ProjectStore, MetricsWritten) {
  auto& ts = trained_store();
  EvalOptions opts;
  opts.num_samples = 2;
  const auto reports = ts.store.metrics(ts.id, opts);
  EXPECT_EQ(reports.size(), 3u);
  EXPECT_TRUE(fs::exists(ts.store.project_dir(ts.id) / "metrics.json"));
}

TEST(ProjectStore, FailedTrainingIsRecorded) {
  TempDir dir;
  ProjectStore store(dir.path());
  const auto id = store.create(pattern_image(40, 40));
  store.set_roi(id, {tiny_box()});
  store.begin_training(id, nlohmann::json(tiny_config(1)));
  EXPECT_THROW(store.run_training(id, [](const ProgressRecord&) { throw Error("boom"); }), Error);
  const auto info = store.info(id);
  EXPECT_EQ(info.status, ProjectStatus::failed);
  EXPECT_NE(info.error.find("boom"), std::string::npos);
}

TEST(ProjectStore, ResumeFromTrainingState) {
  TempDir dir;
  ProjectStore store(dir.path());
  const auto id = store.create(pattern_image(40, 40));
  store.set_roi(id, {tiny_box()});
  store.begin_training(id, nlohmann::json(tiny_config(2)));
  // A second store over the same root models a restarted process.
  ProjectStore restarted(dir.path());
  EXPECT_EQ(restarted.info(id).status, ProjectStatus::training);
  restarted.begin_training(id, nlohmann::json::object());
  restarted.run_training(id);
  EXPECT_EQ(restarted.info(id).status, ProjectStatus::trained);
}
