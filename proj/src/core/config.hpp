#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/model.hpp"
#include "core/synthworld.hpp"

namespace locov {

// Base rate divided by decay_factor once per boundary passed: the rate at
// step s (1-based) is base_lr / decay_factor^|{d in decay_steps : d < s}|.
struct Schedule {
  double base_lr = 0.01;
  std::vector<std::size_t> decay_steps;  // strictly increasing
  double decay_factor = 10.0;

  double rate_at(std::size_t step) const;
};

struct LossToggles {
  bool grounding = true;
  bool icm = true;
  bool mlm = true;
  bool consistency = true;
};

enum class RegionMode { box, grid, both };

std::string region_mode_name(RegionMode mode);
RegionMode region_mode_from_name(const std::string& name);

struct RegionConfig {
  RegionMode mode = RegionMode::both;
  double objectness_threshold = 0.7;
  std::size_t box_cap = 24;     // proposals kept per image
  std::size_t fusion_cap = 16;  // regions passed into cross-attention
};

struct LsmConfig {
  std::size_t steps = 1000;
  std::size_t batch = 4;
  Schedule schedule{0.01, {800}, 10.0};
  LossToggles losses;
  double mask_rate = 0.15;
  bool consistency_bidirectional = false;  // default: q chases a fixed p
  bool train_embeddings = false;           // token table frozen unless set
  std::size_t checkpoint_every = 0;        // extra periodic saves; 0 = final only
};

struct SttConfig {
  std::size_t steps = 900;
  std::size_t batch_images = 4;
  Schedule schedule{0.02, {}, 10.0};
  double label_iou = 0.5;      // proposal vs GT overlap for a class label
  std::size_t eval_every = 0;  // validation period for early stopping; 0 = off
  std::size_t patience = 3;     // evaluations without improvement before stop
  std::vector<std::string> freeze{"encoder/stage1", "encoder/stage2", "proj", "embed"};
};

struct EvalConfig {
  double score_threshold = 0.01;
  double nms_iou = 0.5;
};

// Sweep axes for the comparison grid: which region modes, consistency
// settings, and stage combinations get a cell.
struct AblateConfig {
  std::vector<std::string> region_modes{"both", "box", "grid"};
  std::vector<bool> consistency{true, false};
  std::vector<std::string> stages{"lsm+stt", "stt-only", "lsm-only"};
};

struct ExperimentConfig {
  std::uint64_t seed = 7;  // training-time randomness; the world has its own
  synth::WorldConfig world;
  std::size_t embed_dim = 64;
  std::size_t encoder_stages = 4;
  double embed_init_std = 0.2;
  std::size_t fusion_layers = 6;
  std::size_t fusion_heads = 8;
  std::size_t fusion_ffn_hidden = 128;
  RegionConfig regions;
  LsmConfig lsm;
  SttConfig stt;
  EvalConfig eval;
  AblateConfig ablate;
  std::string output_dir;  // default sink; the CLI --out flag overrides

  ModelDims model_dims(std::size_t vocab_size) const;
  void validate() const;

  nlohmann::ordered_json to_json() const;
  // Starts from defaults and overrides the fields present. Unknown fields,
  // wrong types, and invariant violations raise "invalid-config".
  static ExperimentConfig from_json(const nlohmann::ordered_json& j);
  static ExperimentConfig load_file(const std::string& path);
};

}  // namespace locov
