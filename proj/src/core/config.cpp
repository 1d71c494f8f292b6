#include "core/config.hpp"

#include <cmath>
#include <fstream>

#include "core/error.hpp"

namespace locov {

using nlohmann::ordered_json;

double Schedule::rate_at(std::size_t step) const {
  std::size_t passed = 0;
  for (std::size_t d : decay_steps)
    if (d < step) ++passed;
  return base_lr / std::pow(decay_factor, static_cast<double>(passed));
}

std::string region_mode_name(RegionMode mode) {
  switch (mode) {
    case RegionMode::box: return "box";
    case RegionMode::grid: return "grid";
    case RegionMode::both: return "both";
  }
  fail("invalid-config", "unhandled region mode");
}

RegionMode region_mode_from_name(const std::string& name) {
  if (name == "box") return RegionMode::box;
  if (name == "grid") return RegionMode::grid;
  if (name == "both") return RegionMode::both;
  fail("invalid-config", "regions.mode must be box, grid, or both, got '" + name + "'");
}

ModelDims ExperimentConfig::model_dims(std::size_t vocab_size) const {
  ModelDims d;
  d.vocab = vocab_size;
  d.embed_dim = embed_dim;
  d.feature_dim = world.feature_dim;
  d.encoder_stages = encoder_stages;
  d.embed_init_std = embed_init_std;
  d.fusion.dim = embed_dim;
  d.fusion.layers = fusion_layers;
  d.fusion.heads = fusion_heads;
  d.fusion.ffn_hidden = fusion_ffn_hidden;
  d.fusion.max_positions = world.caption_max;
  return d;
}

namespace {

void check_schedule(const Schedule& s, const std::string& where) {
  if (!(s.base_lr > 0.0)) fail("invalid-config", where + ".base_lr must be positive");
  if (!(s.decay_factor > 0.0)) fail("invalid-config", where + ".decay_factor must be positive");
  for (std::size_t i = 1; i < s.decay_steps.size(); ++i)
    if (s.decay_steps[i] <= s.decay_steps[i - 1])
      fail("invalid-config", where + ".decay_steps must be strictly increasing");
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  if (embed_dim == 0) fail("invalid-config", "embed_dim must be at least 1");
  if (encoder_stages == 0) fail("invalid-config", "encoder_stages must be at least 1");
  if (fusion_layers == 0) fail("invalid-config", "fusion_layers must be at least 1");
  if (fusion_heads == 0) fail("invalid-config", "fusion_heads must be at least 1");
  if (embed_dim % fusion_heads != 0)
    fail("invalid-config", "embed_dim must be divisible by fusion_heads");
  if (fusion_ffn_hidden == 0) fail("invalid-config", "fusion_ffn_hidden must be at least 1");
  if (!(embed_init_std > 0.0)) fail("invalid-config", "embed_init_std must be positive");

  if (regions.box_cap == 0) fail("invalid-config", "regions.box_cap must be at least 1");
  if (regions.fusion_cap == 0) fail("invalid-config", "regions.fusion_cap must be at least 1");
  if (regions.objectness_threshold < 0.0 || regions.objectness_threshold >= 1.0)
    fail("invalid-config", "regions.objectness_threshold must lie in [0, 1)");

  if (lsm.batch == 0) fail("invalid-config", "lsm.batch must be at least 1");
  check_schedule(lsm.schedule, "lsm.schedule");
  if (!(lsm.mask_rate > 0.0) || lsm.mask_rate > 1.0)
    fail("invalid-config", "lsm.mask_rate must lie in (0, 1]");

  if (stt.batch_images == 0) fail("invalid-config", "stt.batch_images must be at least 1");
  check_schedule(stt.schedule, "stt.schedule");
  if (stt.label_iou <= 0.0 || stt.label_iou > 1.0)
    fail("invalid-config", "stt.label_iou must lie in (0, 1]");
  if (stt.eval_every > 0 && stt.patience == 0)
    fail("invalid-config", "stt.patience must be at least 1 when early stopping is on");
  for (const std::string& group : stt.freeze) {
    bool ok = group == "proj" || group == "embed" || group == "fusion";
    if (!ok && group.rfind("encoder/stage", 0) == 0) {
      std::size_t n = 0;
      try {
        n = std::stoul(group.substr(13));
      } catch (const std::exception&) {
        n = 0;
      }
      ok = n >= 1 && n <= encoder_stages;
    }
    if (!ok) fail("invalid-config", "stt.freeze names unknown parameter group '" + group + "'");
  }

  if (eval.score_threshold < 0.0 || eval.score_threshold >= 1.0)
    fail("invalid-config", "eval.score_threshold must lie in [0, 1)");
  if (eval.nms_iou <= 0.0 || eval.nms_iou > 1.0)
    fail("invalid-config", "eval.nms_iou must lie in (0, 1]");

  if (ablate.region_modes.empty() || ablate.consistency.empty() || ablate.stages.empty())
    fail("invalid-config", "ablate axes must be non-empty");
  for (const std::string& m : ablate.region_modes) region_mode_from_name(m);
  for (const std::string& s : ablate.stages)
    if (s != "lsm+stt" && s != "stt-only" && s != "lsm-only")
      fail("invalid-config", "ablate.stages entries must be lsm+stt, stt-only, or lsm-only, got '" + s + "'");
}

namespace {

ordered_json schedule_to_json(const Schedule& s) {
  ordered_json j;
  j["base_lr"] = s.base_lr;
  j["decay_steps"] = s.decay_steps;
  j["decay_factor"] = s.decay_factor;
  return j;
}

ordered_json world_to_json(const synth::WorldConfig& c) { return synth::world_config_to_json(c); }

// Field-by-field readers so a typo in a config file is named, not ignored.

template <typename T>
void read_field(const ordered_json& j, const std::string& key, T& out) {
  out = j.get<T>();
}

void apply_schedule(const ordered_json& j, const std::string& where, Schedule& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "base_lr") read_field(value, key, s.base_lr);
    else if (key == "decay_steps") read_field(value, key, s.decay_steps);
    else if (key == "decay_factor") read_field(value, key, s.decay_factor);
    else fail("invalid-config", "unknown field '" + where + "." + key + "'");
  }
}

void apply_world(const ordered_json& j, synth::WorldConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "known_classes") read_field(value, key, c.known_classes);
    else if (key == "novel_classes") read_field(value, key, c.novel_classes);
    else if (key == "latent_dim") read_field(value, key, c.latent_dim);
    else if (key == "feature_dim") read_field(value, key, c.feature_dim);
    else if (key == "train_images") read_field(value, key, c.train_images);
    else if (key == "val_images") read_field(value, key, c.val_images);
    else if (key == "test_images") read_field(value, key, c.test_images);
    else if (key == "objects_min") read_field(value, key, c.objects_min);
    else if (key == "objects_max") read_field(value, key, c.objects_max);
    else if (key == "caption_min") read_field(value, key, c.caption_min);
    else if (key == "caption_max") read_field(value, key, c.caption_max);
    else if (key == "distractor_tokens") read_field(value, key, c.distractor_tokens);
    else if (key == "grid_size") read_field(value, key, c.grid_size);
    else if (key == "noise_proposals") read_field(value, key, c.noise_proposals);
    else if (key == "image_size") read_field(value, key, c.image_size);
    else if (key == "box_min") read_field(value, key, c.box_min);
    else if (key == "box_max") read_field(value, key, c.box_max);
    else if (key == "feature_noise") read_field(value, key, c.feature_noise);
    else if (key == "background_noise") read_field(value, key, c.background_noise);
    else if (key == "seed") read_field(value, key, c.seed);
    else fail("invalid-config", "unknown field 'world." + key + "'");
  }
}

void apply_regions(const ordered_json& j, RegionConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "mode") c.mode = region_mode_from_name(value.get<std::string>());
    else if (key == "objectness_threshold") read_field(value, key, c.objectness_threshold);
    else if (key == "box_cap") read_field(value, key, c.box_cap);
    else if (key == "fusion_cap") read_field(value, key, c.fusion_cap);
    else fail("invalid-config", "unknown field 'regions." + key + "'");
  }
}

void apply_losses(const ordered_json& j, LossToggles& t) {
  for (const auto& [key, value] : j.items()) {
    if (key == "grounding") read_field(value, key, t.grounding);
    else if (key == "icm") read_field(value, key, t.icm);
    else if (key == "mlm") read_field(value, key, t.mlm);
    else if (key == "consistency") read_field(value, key, t.consistency);
    else fail("invalid-config", "unknown field 'lsm.losses." + key + "'");
  }
}

void apply_lsm(const ordered_json& j, LsmConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") read_field(value, key, c.steps);
    else if (key == "batch") read_field(value, key, c.batch);
    else if (key == "schedule") apply_schedule(value, "lsm.schedule", c.schedule);
    else if (key == "losses") apply_losses(value, c.losses);
    else if (key == "mask_rate") read_field(value, key, c.mask_rate);
    else if (key == "consistency_bidirectional") read_field(value, key, c.consistency_bidirectional);
    else if (key == "train_embeddings") read_field(value, key, c.train_embeddings);
    else if (key == "checkpoint_every") read_field(value, key, c.checkpoint_every);
    else fail("invalid-config", "unknown field 'lsm." + key + "'");
  }
}

void apply_stt(const ordered_json& j, SttConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") read_field(value, key, c.steps);
    else if (key == "batch_images") read_field(value, key, c.batch_images);
    else if (key == "schedule") apply_schedule(value, "stt.schedule", c.schedule);
    else if (key == "label_iou") read_field(value, key, c.label_iou);
    else if (key == "eval_every") read_field(value, key, c.eval_every);
    else if (key == "patience") read_field(value, key, c.patience);
    else if (key == "freeze") read_field(value, key, c.freeze);
    else fail("invalid-config", "unknown field 'stt." + key + "'");
  }
}

void apply_eval(const ordered_json& j, EvalConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "score_threshold") read_field(value, key, c.score_threshold);
    else if (key == "nms_iou") read_field(value, key, c.nms_iou);
    else fail("invalid-config", "unknown field 'eval." + key + "'");
  }
}

void apply_ablate(const ordered_json& j, AblateConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "region_modes") read_field(value, key, c.region_modes);
    else if (key == "consistency") read_field(value, key, c.consistency);
    else if (key == "stages") read_field(value, key, c.stages);
    else fail("invalid-config", "unknown field 'ablate." + key + "'");
  }
}

}  // namespace

ordered_json ExperimentConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["world"] = world_to_json(world);
  j["embed_dim"] = embed_dim;
  j["encoder_stages"] = encoder_stages;
  j["embed_init_std"] = embed_init_std;
  j["fusion_layers"] = fusion_layers;
  j["fusion_heads"] = fusion_heads;
  j["fusion_ffn_hidden"] = fusion_ffn_hidden;
  ordered_json r;
  r["mode"] = region_mode_name(regions.mode);
  r["objectness_threshold"] = regions.objectness_threshold;
  r["box_cap"] = regions.box_cap;
  r["fusion_cap"] = regions.fusion_cap;
  j["regions"] = std::move(r);
  ordered_json l;
  l["steps"] = lsm.steps;
  l["batch"] = lsm.batch;
  l["schedule"] = schedule_to_json(lsm.schedule);
  ordered_json toggles;
  toggles["grounding"] = lsm.losses.grounding;
  toggles["icm"] = lsm.losses.icm;
  toggles["mlm"] = lsm.losses.mlm;
  toggles["consistency"] = lsm.losses.consistency;
  l["losses"] = std::move(toggles);
  l["mask_rate"] = lsm.mask_rate;
  l["consistency_bidirectional"] = lsm.consistency_bidirectional;
  l["train_embeddings"] = lsm.train_embeddings;
  l["checkpoint_every"] = lsm.checkpoint_every;
  j["lsm"] = std::move(l);
  ordered_json s;
  s["steps"] = stt.steps;
  s["batch_images"] = stt.batch_images;
  s["schedule"] = schedule_to_json(stt.schedule);
  s["label_iou"] = stt.label_iou;
  s["eval_every"] = stt.eval_every;
  s["patience"] = stt.patience;
  s["freeze"] = stt.freeze;
  j["stt"] = std::move(s);
  ordered_json e;
  e["score_threshold"] = eval.score_threshold;
  e["nms_iou"] = eval.nms_iou;
  j["eval"] = std::move(e);
  ordered_json a;
  a["region_modes"] = ablate.region_modes;
  a["consistency"] = ablate.consistency;
  a["stages"] = ablate.stages;
  j["ablate"] = std::move(a);
  j["output_dir"] = output_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const ordered_json& j) {
  ExperimentConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") read_field(value, key, c.seed);
      else if (key == "world") apply_world(value, c.world);
      else if (key == "embed_dim") read_field(value, key, c.embed_dim);
      else if (key == "encoder_stages") read_field(value, key, c.encoder_stages);
      else if (key == "embed_init_std") read_field(value, key, c.embed_init_std);
      else if (key == "fusion_layers") read_field(value, key, c.fusion_layers);
      else if (key == "fusion_heads") read_field(value, key, c.fusion_heads);
      else if (key == "fusion_ffn_hidden") read_field(value, key, c.fusion_ffn_hidden);
      else if (key == "regions") apply_regions(value, c.regions);
      else if (key == "lsm") apply_lsm(value, c.lsm);
      else if (key == "stt") apply_stt(value, c.stt);
      else if (key == "eval") apply_eval(value, c.eval);
      else if (key == "ablate") apply_ablate(value, c.ablate);
      else if (key == "output_dir") read_field(value, key, c.output_dir);
      else fail("invalid-config", "unknown field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail("invalid-config", std::string("malformed config value: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("invalid-config", "cannot read config file: " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail("invalid-config", std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

}  // namespace locov
