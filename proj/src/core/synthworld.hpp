#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/detector.hpp"
#include "core/regions.hpp"
#include "core/tensor.hpp"
#include "core/vocab.hpp"

namespace locov::synth {

struct WorldConfig {
  std::size_t known_classes = 20;
  std::size_t novel_classes = 6;
  std::size_t latent_dim = 32;   // prototype space
  std::size_t feature_dim = 24;  // raw region features
  std::size_t train_images = 2000;
  std::size_t val_images = 200;
  std::size_t test_images = 300;
  std::size_t objects_min = 1;
  std::size_t objects_max = 4;
  std::size_t caption_min = 8;
  std::size_t caption_max = 14;
  std::size_t distractor_tokens = 30;
  std::size_t grid_size = 10;
  std::size_t noise_proposals = 20;
  double image_size = 128.0;
  double box_min = 18.0;
  double box_max = 52.0;
  double feature_noise = 0.05;
  double background_noise = 0.25;
  std::uint64_t seed = 7;

  void validate() const;
};

struct SynthObject {
  regions::Box box;
  std::size_t class_id = 0;
};

struct SynthImage {
  std::size_t id = 0;
  std::vector<SynthObject> objects;  // labels visible to this split
  std::vector<regions::Proposal> proposals;
  Tensor proposal_features;  // P x F
  Tensor grid_features;      // G x G x F
  std::vector<std::size_t> caption;
};

struct Split {
  std::vector<SynthImage> images;
};

struct World {
  WorldConfig cfg;
  Vocabulary vocab;
  std::vector<det::ClassInfo> classes;
  Split train, val, test;

  const Split& split(const std::string& name) const;
};

// Fully seeded generation. Object features are class prototypes pushed
// through a fixed affine scramble plus noise; captions name every object's
// class and pad with distractor tokens. The train split keeps images whose
// objects are all novel, but drops their box labels.
World generate_world(const WorldConfig& cfg);

nlohmann::ordered_json world_statistics(const World& world);

nlohmann::ordered_json world_config_to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const nlohmann::ordered_json& j);

}  // namespace locov::synth
