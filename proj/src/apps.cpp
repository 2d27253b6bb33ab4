#include "mogan/apps.hpp"

namespace mogan {

using nlohmann::json;

std::string_view to_string(SampleKind kind) {
  switch (kind) {
    case SampleKind::random: return "random";
    case SampleKind::edit: return "edit";
    case SampleKind::animation_frame: return "animation_frame";
  }
  return "unknown";
}

SampleKind sample_kind_from_string(std::string_view name) {
  if (name == "random") return SampleKind::random;
  if (name == "edit") return SampleKind::edit;
  if (name == "animation_frame") return SampleKind::animation_frame;
  throw ValidationError("unknown sample kind: " + std::string(name));
}

void to_json(json& j, const SampleRecord& r) {
  j = json{{"id", r.id},
           {"project_id", r.project_id},
           {"kind", std::string(to_string(r.kind))},
           {"seed", r.seed},
           {"augment", r.augment},
           {"band_px", r.band_px},
           {"output", r.output},
           {"metrics", r.metrics}};
  if (r.kind == SampleKind::edit) {
    j["edit_input"] = r.edit_input;
    j["min_edit_scale"] = r.min_edit_scale;
  }
  if (r.frame >= 0) j["frame"] = r.frame;
}

void from_json(const json& j, SampleRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.project_id = j.value("project_id", "");
  r.kind = sample_kind_from_string(j.at("kind").get<std::string>());
  r.seed = j.at("seed").get<uint64_t>();
  r.augment = j.at("augment").get<std::vector<AugmentDescriptor>>();
  r.band_px = j.value("band_px", kDefaultBandPx);
  r.output = j.value("output", "");
  r.edit_input = j.value("edit_input", "");
  r.min_edit_scale = j.value("min_edit_scale", 0);
  r.frame = j.value("frame", -1);
  r.metrics = j.value("metrics", json::object());
}

uint64_t sample_noise_seed(uint64_t sample_seed, int box) {
  uint64_t x = sample_seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(box + 1) * 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 31;
  x *= 0x94d049bb133111ebULL;
  return x ^ (x >> 29);
}

Sample compose_sample(const Model& model, uint64_t seed, const std::vector<AugmentDescriptor>& augment,
                      int band_px, const std::optional<Image>& edited, int min_edit_scale) {
  if (!model.fully_trained()) throw StateError("model is not trained");
  if (augment.size() != model.roi.size()) throw ValidationError("need one augmentation descriptor per roi box");
  if (band_px < 0) throw ValidationError("band_px must be >= 0");
  if (edited && (edited->height() != model.source.height() || edited->width() != model.source.width())) {
    throw ValidationError("edited image must match the source dimensions");
  }

  Sample s;
  std::vector<std::pair<Image, RoiBox>> parts;
  for (std::size_t k = 0; k < model.roi.size(); ++k) {
    const auto& stack = model.roi[k];
    NoiseSpec noise{sample_noise_seed(seed, static_cast<int>(k))};
    Image roi = edited ? inject_edit(stack, crop_roi(*edited, stack.box), noise, min_edit_scale)
                       : roi_generate(stack, noise, augment[k], 0, model.config.magnitudes);
    s.roi_images.push_back(roi);
    parts.emplace_back(roi, stack.box);
  }
  s.background = background_generate(model.background, NoiseSpec{sample_noise_seed(seed, -1)});
  s.image = fuse(parts, s.background, band_px);
  s.record.seed = seed;
  s.record.augment = augment;
  s.record.band_px = band_px;
  s.record.min_edit_scale = min_edit_scale;
  s.record.kind = edited ? SampleKind::edit : SampleKind::random;
  return s;
}

Sample generate_sample(const Model& model, uint64_t seed, int band_px) {
  std::vector<AugmentDescriptor> augment;
  for (std::size_t k = 0; k < model.roi.size(); ++k) {
    augment.push_back(sample_descriptor(sample_noise_seed(seed, 1000 + static_cast<int>(k)), model.config.augment_kinds));
  }
  return compose_sample(model, seed, augment, band_px);
}

std::vector<Sample> generate_samples(const Model& model, int count, uint64_t seed, int band_px) {
  if (count < 1) throw ValidationError("count must be >= 1");
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_sample(model, seed + static_cast<uint64_t>(i), band_px));
  return out;
}

Sample edit_sample(const Model& model, const Image& edited, uint64_t seed, int band_px, int min_edit_scale) {
  std::vector<AugmentDescriptor> identity(model.roi.size());
  return compose_sample(model, seed, identity, band_px, edited, min_edit_scale);
}

std::vector<Sample> animate(const Model& model, AugmentKind kind, int frames, double level_max, uint64_t seed,
                            int band_px) {
  const auto schedule = level_schedule(kind, frames, level_max, sample_noise_seed(seed, 2000));
  std::vector<Sample> out;
  for (int f = 0; f < frames; ++f) {
    std::vector<AugmentDescriptor> augment(model.roi.size(), schedule[f]);
    auto s = compose_sample(model, seed, augment, band_px);
    s.record.kind = SampleKind::animation_frame;
    s.record.frame = f;
    out.push_back(std::move(s));
  }
  return out;
}

Sample regenerate(const Model& model, const SampleRecord& record, const std::optional<Image>& edited) {
  if (record.kind == SampleKind::edit && !edited) {
    throw ValidationError("regenerating an edit sample needs its edited input");
  }
  auto s = compose_sample(model, record.seed, record.augment, record.band_px,
                          record.kind == SampleKind::edit ? edited : std::nullopt, record.min_edit_scale);
  auto rec = record;
  s.record = rec;
  return s;
}

double mean_abs_diff(const Image& a, const Image& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw ValidationError("image size mismatch");
  return (a.tensor() - b.tensor()).abs().mean().item<double>();
}

}  // namespace mogan
