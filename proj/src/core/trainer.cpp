#include "core/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "core/error.hpp"
#include "core/evaluation.hpp"
#include "core/matching.hpp"
#include "core/rng.hpp"

namespace locov::train {

using nlohmann::ordered_json;

void Sgd::step(const std::vector<emb::Parameter*>& params, double lr) {
  for (emb::Parameter* p : params) {
    if (!p->trainable) continue;
    auto [it, fresh] = velocity_.try_emplace(p->name, Tensor::zeros(p->value.rows(), p->value.cols()));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < p->value.v.size(); ++i) {
      v.v[i] = momentum_ * v.v[i] + p->grad.v[i];
      p->value.v[i] -= lr * v.v[i];
    }
  }
}

ckpt::Checkpoint snapshot(const std::string& stage, std::size_t step, const ExperimentConfig& cfg,
                          Model& model, const Sgd* opt) {
  ckpt::Checkpoint ck;
  ck.stage = stage;
  ck.step = step;
  ck.config = cfg.to_json();
  for (emb::Parameter* p : model.parameters()) ck.tensors.emplace_back(p->name, p->value);
  if (opt)
    for (const auto& [name, v] : opt->velocity())
      ck.tensors.emplace_back("opt/velocity/" + name, v);
  return ck;
}

void restore(const ckpt::Checkpoint& ck, Model& model, Sgd* opt) {
  auto pmap = model.parameter_map();
  std::size_t matched = 0;
  for (const auto& [name, t] : ck.tensors) {
    const std::string opt_prefix = "opt/velocity/";
    if (name.rfind(opt_prefix, 0) == 0) {
      std::string base = name.substr(opt_prefix.size());
      auto it = pmap.find(base);
      if (it == pmap.end())
        fail("shape-mismatch", "optimizer state '" + name + "' has no matching parameter");
      if (!it->second->value.same_shape(t))
        fail("shape-mismatch", "optimizer state '" + name + "' shape disagrees with the model");
      if (opt) opt->velocity()[base] = t;
      continue;
    }
    auto it = pmap.find(name);
    if (it == pmap.end()) fail("shape-mismatch", "checkpoint tensor '" + name + "' is not a model parameter");
    if (!it->second->value.same_shape(t))
      fail("shape-mismatch", "parameter '" + name + "' shape disagrees with the model");
    it->second->value = t;
    ++matched;
  }
  if (matched != pmap.size())
    fail("shape-mismatch", "checkpoint covers " + std::to_string(matched) + " of " +
                               std::to_string(pmap.size()) + " model parameters");
}

regions::RegionSet box_regions_for(const synth::SynthImage& img, const ExperimentConfig& cfg) {
  return regions::select_box_regions(img.proposals, img.proposal_features,
                                     cfg.regions.objectness_threshold, cfg.regions.box_cap);
}

regions::RegionSet grid_regions_for(const synth::SynthImage& img, const ExperimentConfig& cfg) {
  return regions::make_grid_regions(img.grid_features, cfg.world.image_size, cfg.world.image_size);
}

det::LabeledRegions label_regions(const synth::SynthImage& img, const ExperimentConfig& cfg,
                                  std::size_t background_label) {
  regions::RegionSet rs = box_regions_for(img, cfg);
  det::LabeledRegions out;
  out.raw_features = rs.features;
  out.labels.reserve(rs.count());
  for (const regions::Box& box : rs.boxes) {
    double best = 0.0;
    std::size_t best_class = background_label;
    for (const synth::SynthObject& obj : img.objects) {
      double overlap = regions::iou(box, obj.box);
      if (overlap > best) {
        best = overlap;
        best_class = obj.class_id;
      }
    }
    out.labels.push_back(best >= cfg.stt.label_iou ? best_class : background_label);
  }
  return out;
}

namespace {

std::vector<std::size_t> sample_indices(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k >= n) return idx;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.index(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

diff::Var scalar_matrix(std::size_t b, const std::vector<diff::Var>& cells) {
  return diff::stack_scalars(b, b, cells);
}

diff::Var mean_of(const std::vector<diff::Var>& xs) {
  diff::Var total = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) total = diff::add(total, xs[i]);
  return diff::scale(total, 1.0 / static_cast<double>(xs.size()));
}

double scalar_value(diff::Var v) { return v.value().v[0]; }

}  // namespace

void train_lsm(Model& model, const synth::World& world, const ExperimentConfig& cfg, Sgd& opt,
               const MetricsSink& metrics, const CheckpointSink& periodic) {
  const synth::Split& split = world.train;
  if (split.images.empty()) fail("invalid-config", "train split is empty");

  bool use_box = cfg.regions.mode != RegionMode::grid;
  bool use_grid = cfg.regions.mode != RegionMode::box;
  const LossToggles& on = cfg.lsm.losses;
  bool need_sims = on.grounding || on.consistency;
  bool need_fused = on.icm || on.consistency;
  std::size_t pad = world.vocab.pad_id();
  std::size_t mask = world.vocab.mask_id();

  Rng root(cfg.seed);
  Rng sample_rng = root.fork(21);
  Rng mask_rng = root.fork(22);

  std::vector<emb::Parameter*> params = model.parameters();

  for (std::size_t step = 1; step <= cfg.lsm.steps; ++step) {
    double lr = cfg.lsm.schedule.rate_at(step);
    std::vector<std::size_t> batch = sample_indices(sample_rng, split.images.size(), cfg.lsm.batch);
    std::size_t b = batch.size();

    diff::Tape tape;
    emb::Binding bind(tape);
    diff::Var table = bind(model.table.table);

    std::vector<diff::Var> words(b);
    std::vector<diff::Var> box_full(b), grid_full(b), box_fuse(b), grid_fuse(b);
    for (std::size_t i = 0; i < b; ++i) {
      const synth::SynthImage& img = split.images[batch[i]];
      words[i] = emb::embed_caption(table, img.caption, pad);
      if (use_box) {
        regions::RegionSet rs = box_regions_for(img, cfg);
        if (rs.count() == 0)
          fail("empty-side", "image " + std::to_string(img.id) + " has no proposals above the objectness threshold");
        box_full[i] = model.encode_regions(bind, tape.constant(rs.features));
        box_fuse[i] = diff::take_rows(box_full[i], regions::subsample_indices(rs.count(), cfg.regions.fusion_cap));
      }
      if (use_grid) {
        regions::RegionSet rs = grid_regions_for(img, cfg);
        grid_full[i] = model.encode_regions(bind, tape.constant(rs.features));
        grid_fuse[i] = diff::take_rows(grid_full[i], regions::subsample_indices(rs.count(), cfg.regions.fusion_cap));
      }
    }

    // sims[i][j]: image i's regions against caption j, for each active kind
    diff::Var box_sims, grid_sims;
    if (need_sims) {
      std::vector<diff::Var> cells;
      cells.reserve(b * b);
      if (use_box) {
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j)
            cells.push_back(match::image_caption_similarity(box_full[i], words[j]));
        box_sims = scalar_matrix(b, cells);
        cells.clear();
      }
      if (use_grid) {
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j)
            cells.push_back(match::image_caption_similarity(grid_full[i], words[j]));
        grid_sims = scalar_matrix(b, cells);
      }
    }

    diff::Var box_fused, grid_fused;
    if (need_fused) {
      std::vector<diff::Var> cells;
      cells.reserve(b * b);
      if (use_box) {
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j)
            cells.push_back(model.xattn.forward(bind, box_fuse[i], words[j]).score);
        box_fused = scalar_matrix(b, cells);
        cells.clear();
      }
      if (use_grid) {
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j)
            cells.push_back(model.xattn.forward(bind, grid_fuse[i], words[j]).score);
        grid_fused = scalar_matrix(b, cells);
      }
    }

    std::vector<diff::Var> components;
    double v_g = 0.0, v_icm = 0.0, v_mlm = 0.0, v_cons = 0.0;

    if (on.grounding) {
      diff::Var lg;
      if (use_box && use_grid) {
        lg = match::total_grounding_loss(box_sims, grid_sims);
      } else {
        diff::Var s = use_box ? box_sims : grid_sims;
        lg = diff::add(match::grounding_loss(s, match::Axis::image),
                       match::grounding_loss(s, match::Axis::caption));
      }
      v_g = scalar_value(lg);
      components.push_back(lg);
    }

    if (on.icm) {
      diff::Var li;
      if (use_box && use_grid)
        li = diff::add(fusion::icm_loss(box_fused), fusion::icm_loss(grid_fused));
      else
        li = fusion::icm_loss(use_box ? box_fused : grid_fused);
      v_icm = scalar_value(li);
      components.push_back(li);
    }

    if (on.mlm) {
      std::vector<diff::Var> per_image;
      per_image.reserve(b);
      for (std::size_t i = 0; i < b; ++i) {
        const synth::SynthImage& img = split.images[batch[i]];
        fusion::MaskedCaption masked =
            fusion::mask_caption(img.caption, cfg.lsm.mask_rate, mask_rng, mask, pad);
        per_image.push_back(fusion::mlm_loss(bind, model.xattn, table, masked,
                                             use_box ? box_fuse[i] : grid_fuse[i], pad));
      }
      diff::Var lm = mean_of(per_image);
      v_mlm = scalar_value(lm);
      components.push_back(lm);
    }

    if (on.consistency) {
      diff::Var lc;
      if (use_box && use_grid) {
        diff::Var p_box = diff::row_softmax(box_sims);
        diff::Var p_grid = diff::row_softmax(grid_sims);
        if (!cfg.lsm.consistency_bidirectional) {
          p_box = diff::stop_gradient(p_box);
          p_grid = diff::stop_gradient(p_grid);
        }
        lc = fusion::consistency_loss(p_box, p_grid, diff::row_softmax(box_fused),
                                      diff::row_softmax(grid_fused));
      } else {
        diff::Var p = diff::row_softmax(use_box ? box_sims : grid_sims);
        if (!cfg.lsm.consistency_bidirectional) p = diff::stop_gradient(p);
        lc = fusion::consistency_loss_single(p, diff::row_softmax(use_box ? box_fused : grid_fused));
      }
      v_cons = scalar_value(lc);
      components.push_back(lc);
    }

    double total = 0.0;
    if (!components.empty()) {
      diff::Var loss = fusion::lsm_total_loss(components);
      total = scalar_value(loss);
      tape.backward(loss);
      model.zero_grads();
      bind.harvest();
      opt.step(params, lr);
    }

    if (metrics) {
      ordered_json rec;
      rec["step"] = step;
      rec["lr"] = lr;
      rec["loss_grounding"] = v_g;
      rec["loss_icm"] = v_icm;
      rec["loss_mlm"] = v_mlm;
      rec["loss_consistency"] = v_cons;
      rec["loss_total"] = total;
      metrics(rec);
    }
    if (periodic && cfg.lsm.checkpoint_every > 0 && step % cfg.lsm.checkpoint_every == 0 &&
        step != cfg.lsm.steps)
      periodic(step, model, opt);
  }
}

namespace {

double validation_generalized_ap(const Model& model, const synth::World& world,
                                 const det::ClassCatalog& catalog, const ExperimentConfig& cfg) {
  std::vector<det::DetectionSet> dets;
  std::vector<eval::ImageGroundTruth> gts;
  dets.reserve(world.val.images.size());
  gts.reserve(world.val.images.size());
  for (const synth::SynthImage& img : world.val.images) {
    regions::RegionSet rs = box_regions_for(img, cfg);
    if (rs.count() == 0)
      dets.push_back(det::DetectionSet{det::Setup::generalized, {}});
    else
      dets.push_back(det::detect(model, rs, catalog, det::Setup::generalized,
                                 cfg.eval.score_threshold, cfg.eval.nms_iou));
    eval::ImageGroundTruth gt;
    for (const synth::SynthObject& obj : img.objects)
      gt.boxes.push_back({obj.box, obj.class_id});
    gts.push_back(std::move(gt));
  }
  eval::EvalReport report = eval::evaluate({{"generalized", dets}}, gts, catalog);
  return report.setups.at("generalized").ap;
}

}  // namespace

SttResult train_stt(Model& model, const synth::World& world, const ExperimentConfig& cfg, Sgd& opt,
                    const MetricsSink& metrics) {
  FreezePolicy policy;
  policy.frozen.insert(cfg.stt.freeze.begin(), cfg.stt.freeze.end());
  model.apply_freeze(policy);

  det::ClassCatalog catalog = det::ClassCatalog::build(world.classes, model.table);
  std::size_t background = catalog.classes.size();

  std::vector<std::size_t> usable;  // images that carry at least one labeled box
  for (std::size_t i = 0; i < world.train.images.size(); ++i)
    if (!world.train.images[i].objects.empty()) usable.push_back(i);
  if (usable.empty() && cfg.stt.steps > 0)
    fail("invalid-config", "train split has no labeled images for the tuning stage");

  Rng root(cfg.seed);
  Rng sample_rng = root.fork(31);
  std::vector<emb::Parameter*> params = model.parameters();

  bool early = cfg.stt.eval_every > 0;
  double best_ap = -1.0;
  std::size_t best_step = 0;
  std::size_t strikes = 0;
  std::vector<Tensor> best_values;

  SttResult result;
  for (std::size_t step = 1; step <= cfg.stt.steps; ++step) {
    double lr = cfg.stt.schedule.rate_at(step);
    std::vector<std::size_t> batch = sample_indices(sample_rng, usable.size(), cfg.stt.batch_images);

    det::LabeledRegions merged;
    std::size_t cols = 0, rows = 0;
    std::vector<det::LabeledRegions> parts;
    for (std::size_t pick : batch) {
      parts.push_back(label_regions(world.train.images[usable[pick]], cfg, background));
      rows += parts.back().raw_features.rows();
      cols = parts.back().raw_features.cols();
    }
    merged.raw_features = Tensor(rows, cols);
    std::size_t at = 0;
    for (const det::LabeledRegions& part : parts) {
      for (std::size_t r = 0; r < part.raw_features.rows(); ++r, ++at)
        for (std::size_t c = 0; c < cols; ++c)
          merged.raw_features.at(at, c) = part.raw_features.at(r, c);
      merged.labels.insert(merged.labels.end(), part.labels.begin(), part.labels.end());
    }

    diff::Tape tape;
    emb::Binding bind(tape);
    diff::Var loss = det::stt_loss(bind, model, catalog, merged);
    if (!loss.value().all_finite()) fail("non-finite-loss", "tuning loss is not finite");
    double loss_value = scalar_value(loss);
    tape.backward(loss);
    model.zero_grads();
    bind.harvest();
    opt.step(params, lr);

    ordered_json rec;
    rec["step"] = step;
    rec["lr"] = lr;
    rec["loss_stt"] = loss_value;
    rec["val_generalized_ap"] = nullptr;

    bool stop = false;
    if (early && (step % cfg.stt.eval_every == 0 || step == cfg.stt.steps)) {
      det::ClassCatalog current = model.table.table.trainable
                                      ? det::ClassCatalog::build(world.classes, model.table)
                                      : catalog;
      double ap = validation_generalized_ap(model, world, current, cfg);
      rec["val_generalized_ap"] = ap;
      if (ap > best_ap) {
        best_ap = ap;
        best_step = step;
        strikes = 0;
        best_values.clear();
        for (emb::Parameter* p : params) best_values.push_back(p->value);
      } else if (++strikes >= cfg.stt.patience) {
        stop = true;
      }
    }

    if (metrics) metrics(rec);
    result.steps_run = step;
    if (stop) break;
  }

  if (early && !best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    result.best_step = best_step;
    result.best_val_ap = best_ap;
  } else {
    result.best_step = result.steps_run;
  }
  return result;
}

}  // namespace locov::train
