#include "core/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "core/error.hpp"
#include "core/rng.hpp"

namespace locov::synth {

void WorldConfig::validate() const {
  auto bad = [](const std::string& why) { fail("invalid-config", why); };
  if (known_classes < 2) bad("need at least two known classes");
  if (novel_classes < 1) bad("need at least one novel class");
  if (latent_dim == 0 || feature_dim == 0) bad("feature dimensions must be positive");
  if (train_images == 0 || val_images == 0 || test_images == 0) bad("every split needs images");
  if (objects_min < 1 || objects_min > objects_max) bad("object count range is empty");
  if (caption_min < 2 || caption_min > caption_max) bad("caption length range is empty");
  if (caption_max < 2 * objects_max + 1) bad("captions too short to name every object plus a distractor");
  if (distractor_tokens < 2) bad("need distractor tokens");
  if (grid_size == 0) bad("grid size must be positive");
  if (noise_proposals == 0) bad("need noise proposals");
  if (!(box_min > 0.0) || box_min > box_max || box_max >= image_size) bad("box size range is invalid");
  if (!(feature_noise >= 0.0) || !(background_noise >= 0.0)) bad("noise levels must be non-negative");
}

const Split& World::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  fail("invalid-config", "unknown split: " + name);
}

namespace {

struct Generator {
  const WorldConfig& cfg;
  std::vector<Tensor> prototypes;  // per class, 1 x latent
  Tensor scramble;                 // latent x F
  Tensor scramble_offset;          // 1 x F
  Tensor background;               // 1 x latent
  std::vector<std::size_t> distractor_ids;

  Tensor raw_from_latent(const Tensor& latent) const {
    Tensor raw = matmul(latent, scramble);
    for (std::size_t j = 0; j < raw.cols(); ++j) raw.v[j] += scramble_offset.v[j];
    return raw;
  }

  Tensor object_latent(std::size_t class_id, Rng& rng) const {
    Tensor l = prototypes[class_id];
    for (double& e : l.v) e += rng.normal(0.0, cfg.feature_noise);
    return l;
  }

  Tensor background_latent(Rng& rng) const {
    Tensor l = background;
    for (double& e : l.v) e += rng.normal(0.0, cfg.background_noise);
    return l;
  }
};

regions::Box random_box(const WorldConfig& cfg, Rng& rng) {
  double w = rng.uniform(cfg.box_min, cfg.box_max);
  double h = rng.uniform(cfg.box_min, cfg.box_max);
  double x1 = rng.uniform(0.0, cfg.image_size - w);
  double y1 = rng.uniform(0.0, cfg.image_size - h);
  return regions::Box{x1, y1, x1 + w, y1 + h};
}

regions::Box jittered(const regions::Box& b, double amount, const WorldConfig& cfg, Rng& rng) {
  double w = b.width(), h = b.height();
  regions::Box j{b.x1 + rng.uniform(-amount, amount) * w, b.y1 + rng.uniform(-amount, amount) * h,
                 b.x2 + rng.uniform(-amount, amount) * w, b.y2 + rng.uniform(-amount, amount) * h};
  j.x1 = std::clamp(j.x1, 0.0, cfg.image_size - 1.0);
  j.y1 = std::clamp(j.y1, 0.0, cfg.image_size - 1.0);
  j.x2 = std::clamp(j.x2, j.x1 + 1.0, cfg.image_size);
  j.y2 = std::clamp(j.y2, j.y1 + 1.0, cfg.image_size);
  return j;
}

bool intersects(const regions::Box& a, const regions::Box& b) {
  return std::min(a.x2, b.x2) > std::max(a.x1, b.x1) && std::min(a.y2, b.y2) > std::max(a.y1, b.y1);
}

SynthImage make_image(const Generator& gen, std::size_t image_id, Rng rng) {
  const WorldConfig& cfg = gen.cfg;
  SynthImage img;
  img.id = image_id;

  std::size_t n_objects = cfg.objects_min + rng.index(cfg.objects_max - cfg.objects_min + 1);
  std::vector<SynthObject> objects;
  for (std::size_t i = 0; i < n_objects; ++i) {
    SynthObject o;
    o.class_id = rng.index(gen.prototypes.size());
    o.box = random_box(cfg, rng);
    objects.push_back(o);
  }

  // two jittered copies of every annotation plus pure-noise proposals
  for (const SynthObject& o : objects) {
    img.proposals.push_back({jittered(o.box, 0.03, cfg, rng), rng.uniform(0.82, 0.99)});
    img.proposals.push_back({jittered(o.box, 0.10, cfg, rng), rng.uniform(0.72, 0.93)});
  }
  for (std::size_t i = 0; i < cfg.noise_proposals; ++i)
    img.proposals.push_back({random_box(cfg, rng), rng.uniform(0.30, 0.95)});
  rng.shuffle(img.proposals);

  img.proposal_features = Tensor(img.proposals.size(), cfg.feature_dim);
  for (std::size_t p = 0; p < img.proposals.size(); ++p) {
    double best_iou = 0.0;
    std::size_t best = objects.size();
    for (std::size_t o = 0; o < objects.size(); ++o) {
      double ov = regions::iou(img.proposals[p].box, objects[o].box);
      if (ov > best_iou) {
        best_iou = ov;
        best = o;
      }
    }
    Tensor latent = (best != objects.size() && best_iou >= 0.5)
                        ? gen.object_latent(objects[best].class_id, rng)
                        : gen.background_latent(rng);
    Tensor raw = gen.raw_from_latent(latent);
    for (std::size_t j = 0; j < cfg.feature_dim; ++j) img.proposal_features.at(p, j) = raw.v[j];
  }

  std::size_t g = cfg.grid_size;
  img.grid_features = Tensor(g * g, cfg.feature_dim);
  img.grid_features.shape = {g, g, cfg.feature_dim};
  double cell = cfg.image_size / static_cast<double>(g);
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t c = 0; c < g; ++c) {
      regions::Box cell_box{c * cell, r * cell, (c + 1) * cell, (r + 1) * cell};
      Tensor latent(1, cfg.latent_dim);
      std::size_t hits = 0;
      for (const SynthObject& o : objects) {
        if (!intersects(cell_box, o.box)) continue;
        add_into(latent, gen.prototypes[o.class_id]);
        ++hits;
      }
      if (hits > 0) {
        for (double& e : latent.v) e /= static_cast<double>(hits);
        for (double& e : latent.v) e += rng.normal(0.0, cfg.feature_noise);
      } else {
        latent = gen.background_latent(rng);
      }
      Tensor raw = gen.raw_from_latent(latent);
      for (std::size_t j = 0; j < cfg.feature_dim; ++j)
        img.grid_features.v[(r * g + c) * cfg.feature_dim + j] = raw.v[j];
    }
  }

  img.objects = std::move(objects);
  return img;
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World world;
  world.cfg = cfg;

  std::size_t total_classes = cfg.known_classes + cfg.novel_classes;
  Rng master(cfg.seed);

  // class names; every third class gets a two-token name
  for (std::size_t i = 0; i < total_classes; ++i) {
    det::ClassInfo info;
    info.id = i;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "obj%02zu", i);
    info.name = buf;
    info.known = i < cfg.known_classes;
    std::vector<std::string> parts{info.name};
    if (i % 3 == 2) {
      parts.push_back(info.name + "x");
      info.name += " " + parts[1];
    }
    for (const std::string& p : parts) info.token_ids.push_back(world.vocab.add(p));
    world.classes.push_back(std::move(info));
  }
  std::vector<std::size_t> distractors;
  for (std::size_t i = 0; i < cfg.distractor_tokens; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "d%02zu", i);
    distractors.push_back(world.vocab.add(buf));
  }

  Generator gen{cfg, {}, {}, {}, {}, distractors};
  Rng proto_rng = master.fork(1);
  for (std::size_t i = 0; i < total_classes; ++i) {
    Tensor p = Tensor::randn(1, cfg.latent_dim, proto_rng);
    double norm = 0.0;
    for (double e : p.v) norm += e * e;
    norm = std::sqrt(norm);
    for (double& e : p.v) e /= norm;
    gen.prototypes.push_back(std::move(p));
  }
  Rng mix_rng = master.fork(2);
  gen.scramble = Tensor::randn(cfg.latent_dim, cfg.feature_dim, mix_rng,
                               3.0 / std::sqrt(static_cast<double>(cfg.latent_dim)));
  gen.scramble_offset = Tensor::randn(1, cfg.feature_dim, mix_rng, 0.1);
  Rng bg_rng = master.fork(3);
  gen.background = Tensor::randn(1, cfg.latent_dim, bg_rng);
  {
    double norm = 0.0;
    for (double e : gen.background.v) norm += e * e;
    norm = std::sqrt(norm);
    for (double& e : gen.background.v) e *= 0.3 / norm;
  }

  // caption: tokens of every distinct object class (by first appearance),
  // padded with distractors to the sampled length, then shuffled
  auto fill_caption = [&](SynthImage& img, Rng& rng) {
    std::vector<std::size_t> tokens;
    std::set<std::size_t> seen;
    for (const SynthObject& o : img.objects)
      if (seen.insert(o.class_id).second)
        for (std::size_t tid : world.classes[o.class_id].token_ids) tokens.push_back(tid);
    std::size_t target = cfg.caption_min + rng.index(cfg.caption_max - cfg.caption_min + 1);
    if (target < tokens.size() + 1) target = tokens.size() + 1;
    while (tokens.size() < target) tokens.push_back(distractors[rng.index(distractors.size())]);
    rng.shuffle(tokens);
    img.caption = std::move(tokens);
  };

  auto make_split = [&](std::size_t count, std::uint64_t stream, bool strip_novel) {
    Split split;
    Rng split_rng = master.fork(stream);
    for (std::size_t i = 0; i < count; ++i) {
      Rng img_rng = split_rng.fork(i);
      SynthImage img = make_image(gen, i, img_rng.fork(0));
      Rng cap_rng = img_rng.fork(1);
      fill_caption(img, cap_rng);
      if (strip_novel) {
        img.objects.erase(
            std::remove_if(img.objects.begin(), img.objects.end(),
                           [&](const SynthObject& o) { return o.class_id >= cfg.known_classes; }),
            img.objects.end());
      }
      split.images.push_back(std::move(img));
    }
    return split;
  };

  world.train = make_split(cfg.train_images, 10, true);
  world.val = make_split(cfg.val_images, 11, false);
  world.test = make_split(cfg.test_images, 12, false);
  return world;
}

nlohmann::ordered_json world_statistics(const World& world) {
  nlohmann::ordered_json out;
  out["classes"] = world.classes.size();
  out["known_classes"] = world.cfg.known_classes;
  out["novel_classes"] = world.cfg.novel_classes;

  for (const char* name : {"train", "val", "test"}) {
    const Split& split = world.split(name);
    nlohmann::ordered_json s;
    s["images"] = split.images.size();

    std::map<std::string, std::size_t> freq;
    std::size_t gt_total = 0, gt_recalled = 0, captions_covering = 0, proposals_total = 0;
    for (const SynthImage& img : split.images) {
      proposals_total += img.proposals.size();
      bool covered = true;
      for (const SynthObject& o : img.objects) {
        freq[world.classes[o.class_id].name]++;
        ++gt_total;
        bool hit = false;
        for (std::size_t p = 0; p < img.proposals.size(); ++p) {
          if (img.proposals[p].objectness <= 0.7) continue;
          if (regions::iou(img.proposals[p].box, o.box) >= 0.5) {
            hit = true;
            break;
          }
        }
        if (hit) ++gt_recalled;
        for (std::size_t tid : world.classes[o.class_id].token_ids)
          if (std::find(img.caption.begin(), img.caption.end(), tid) == img.caption.end()) covered = false;
      }
      if (covered) ++captions_covering;
    }
    s["objects_per_class"] = freq;
    s["proposal_recall_iou50"] = gt_total ? static_cast<double>(gt_recalled) / gt_total : 0.0;
    s["caption_coverage"] = split.images.empty()
                                ? 0.0
                                : static_cast<double>(captions_covering) / split.images.size();
    s["mean_proposals_per_image"] =
        split.images.empty() ? 0.0 : static_cast<double>(proposals_total) / split.images.size();
    out[name] = std::move(s);
  }
  return out;
}

nlohmann::ordered_json world_config_to_json(const WorldConfig& c) {
  nlohmann::ordered_json j;
  j["known_classes"] = c.known_classes;
  j["novel_classes"] = c.novel_classes;
  j["latent_dim"] = c.latent_dim;
  j["feature_dim"] = c.feature_dim;
  j["train_images"] = c.train_images;
  j["val_images"] = c.val_images;
  j["test_images"] = c.test_images;
  j["objects_min"] = c.objects_min;
  j["objects_max"] = c.objects_max;
  j["caption_min"] = c.caption_min;
  j["caption_max"] = c.caption_max;
  j["distractor_tokens"] = c.distractor_tokens;
  j["grid_size"] = c.grid_size;
  j["noise_proposals"] = c.noise_proposals;
  j["image_size"] = c.image_size;
  j["box_min"] = c.box_min;
  j["box_max"] = c.box_max;
  j["feature_noise"] = c.feature_noise;
  j["background_noise"] = c.background_noise;
  j["seed"] = c.seed;
  return j;
}

WorldConfig world_config_from_json(const nlohmann::ordered_json& j) {
  WorldConfig c;
  c.known_classes = j.at("known_classes");
  c.novel_classes = j.at("novel_classes");
  c.latent_dim = j.at("latent_dim");
  c.feature_dim = j.at("feature_dim");
  c.train_images = j.at("train_images");
  c.val_images = j.at("val_images");
  c.test_images = j.at("test_images");
  c.objects_min = j.at("objects_min");
  c.objects_max = j.at("objects_max");
  c.caption_min = j.at("caption_min");
  c.caption_max = j.at("caption_max");
  c.distractor_tokens = j.at("distractor_tokens");
  c.grid_size = j.at("grid_size");
  c.noise_proposals = j.at("noise_proposals");
  c.image_size = j.at("image_size");
  c.box_min = j.at("box_min");
  c.box_max = j.at("box_max");
  c.feature_noise = j.at("feature_noise");
  c.background_noise = j.at("background_noise");
  c.seed = j.at("seed");
  return c;
}

}  // namespace locov::synth
