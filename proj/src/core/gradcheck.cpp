#include "core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "core/detector.hpp"
#include "core/error.hpp"
#include "core/fusion.hpp"
#include "core/matching.hpp"
#include "core/model.hpp"
#include "core/rng.hpp"

namespace locov::gradcheck {

using nlohmann::ordered_json;

namespace {

std::string group_of(const std::string& name) {
  if (name.rfind("encoder/", 0) == 0) return name.substr(0, name.find('/', 8));
  return name.substr(0, name.find('/'));
}

enum class ParamFilter { all, fusion_only, no_fusion };

bool admitted(ParamFilter f, const std::string& group) {
  if (f == ParamFilter::fusion_only) return group == "fusion";
  if (f == ParamFilter::no_fusion) return group != "fusion";
  return true;
}

// One random tiny problem: a model plus a fixed batch of raw region
// features, captions, pre-drawn masks, and a labeled-region batch for the
// tuning loss. Everything the losses read is stored here so finite
// differences see exactly the function the tape differentiated.
struct Instance {
  Model model;
  std::size_t b = 0;
  std::vector<Tensor> box_raw, grid_raw;
  std::vector<std::vector<std::size_t>> captions;
  std::vector<fusion::MaskedCaption> masked;
  det::ClassCatalog catalog;
  det::LabeledRegions labeled;
};

Instance make_instance(Rng& rng, bool heavy) {
  Instance inst;
  ModelDims dims;
  dims.vocab = 6 + rng.index(3);
  dims.embed_dim = heavy ? 4 : 4 + 2 * rng.index(3);  // 4..8, even for 2 heads
  dims.feature_dim = 3 + rng.index(2);
  dims.encoder_stages = 1 + rng.index(2);
  dims.embed_init_std = 0.4;  // large enough that gradients are well away from 0
  dims.fusion.dim = dims.embed_dim;
  dims.fusion.layers = 2;
  dims.fusion.heads = 2;
  dims.fusion.ffn_hidden = 3;
  dims.fusion.max_positions = 4;
  Rng init_rng = rng.fork(1);
  inst.model.init(dims, init_rng);
  // the stock zero score head would silence every gradient behind it;
  // finite differences should probe a generic point instead
  Tensor& sw = inst.model.parameter_map().at("fusion/score/weight")->value;
  sw = Tensor::randn(sw.rows(), sw.cols(), init_rng, 0.5);

  inst.b = heavy ? 2 : 2 + rng.index(2);
  for (std::size_t i = 0; i < inst.b; ++i) {
    std::size_t n_box = 1 + rng.index(2);
    std::size_t n_grid = 1 + rng.index(2);
    inst.box_raw.push_back(Tensor::randn(n_box, dims.feature_dim, rng, 0.8));
    inst.grid_raw.push_back(Tensor::randn(n_grid, dims.feature_dim, rng, 0.8));
    std::size_t m = 2 + rng.index(2);
    std::vector<std::size_t> caption;
    for (std::size_t t = 0; t < m; ++t) caption.push_back(2 + rng.index(dims.vocab - 2));
    inst.masked.push_back(fusion::mask_caption(caption, 0.5, rng, 1, 0));
    inst.captions.push_back(std::move(caption));
  }

  std::vector<det::ClassInfo> classes;
  for (std::size_t k = 0; k < 2; ++k)
    classes.push_back(det::ClassInfo{k, "c" + std::to_string(k), {2 + rng.index(dims.vocab - 2)}, true});
  inst.catalog = det::ClassCatalog::build(classes, inst.model.table);
  std::size_t n_regions = 2 + rng.index(2);
  inst.labeled.raw_features = Tensor::randn(n_regions, dims.feature_dim, rng, 0.8);
  for (std::size_t r = 0; r < n_regions; ++r) inst.labeled.labels.push_back(rng.index(3));  // 2 = background
  return inst;
}

enum class Family { grounding, icm, mlm, consistency, lsm_total, stt };

diff::Var family_loss(Family fam, Instance& inst, emb::Binding& bind, bool bidirectional) {
  diff::Tape& tape = bind.tape();
  if (fam == Family::stt) return det::stt_loss(bind, inst.model, inst.catalog, inst.labeled);

  diff::Var table = bind(inst.model.table.table);
  std::size_t b = inst.b;
  std::vector<diff::Var> words(b), box_emb(b), grid_emb(b);
  for (std::size_t i = 0; i < b; ++i) {
    words[i] = emb::embed_caption(table, inst.captions[i], 0);
    box_emb[i] = inst.model.encode_regions(bind, tape.constant(inst.box_raw[i]));
    grid_emb[i] = inst.model.encode_regions(bind, tape.constant(inst.grid_raw[i]));
  }

  bool need_sims = fam == Family::grounding || fam == Family::consistency || fam == Family::lsm_total;
  bool need_fused = fam == Family::icm || fam == Family::consistency || fam == Family::lsm_total;

  diff::Var box_sims, grid_sims, box_fused, grid_fused;
  if (need_sims) {
    std::vector<diff::Var> bc, gc;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        bc.push_back(match::image_caption_similarity(box_emb[i], words[j]));
        gc.push_back(match::image_caption_similarity(grid_emb[i], words[j]));
      }
    box_sims = diff::stack_scalars(b, b, bc);
    grid_sims = diff::stack_scalars(b, b, gc);
  }
  if (need_fused) {
    std::vector<diff::Var> bc, gc;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        bc.push_back(inst.model.xattn.forward(bind, box_emb[i], words[j]).score);
        gc.push_back(inst.model.xattn.forward(bind, grid_emb[i], words[j]).score);
      }
    box_fused = diff::stack_scalars(b, b, bc);
    grid_fused = diff::stack_scalars(b, b, gc);
  }

  auto grounding = [&] { return match::total_grounding_loss(box_sims, grid_sims); };
  auto icm = [&] { return diff::add(fusion::icm_loss(box_fused), fusion::icm_loss(grid_fused)); };
  auto mlm = [&] {
    std::vector<diff::Var> per;
    for (std::size_t i = 0; i < b; ++i)
      per.push_back(fusion::mlm_loss(bind, inst.model.xattn, table, inst.masked[i], box_emb[i], 0));
    diff::Var total = per[0];
    for (std::size_t i = 1; i < per.size(); ++i) total = diff::add(total, per[i]);
    return diff::scale(total, 1.0 / static_cast<double>(per.size()));
  };
  auto consistency = [&] {
    diff::Var p_box = diff::row_softmax(box_sims);
    diff::Var p_grid = diff::row_softmax(grid_sims);
    if (!bidirectional) {
      p_box = diff::stop_gradient(p_box);
      p_grid = diff::stop_gradient(p_grid);
    }
    return fusion::consistency_loss(p_box, p_grid, diff::row_softmax(box_fused),
                                    diff::row_softmax(grid_fused));
  };

  switch (fam) {
    case Family::grounding: return grounding();
    case Family::icm: return icm();
    case Family::mlm: return mlm();
    case Family::consistency: return consistency();
    case Family::lsm_total:
      return fusion::lsm_total_loss({grounding(), icm(), mlm(), consistency()});
    default: fail("invalid-config", "unknown gradient-check family");
  }
}

struct FamilySpec {
  std::string name;
  Family fam;
  bool bidirectional;
  ParamFilter filter;
};

}  // namespace

std::vector<GroupResult> check_gradients(const std::function<double()>& value,
                                         const std::vector<emb::Parameter*>& params,
                                         const Options& opt) {
  std::map<std::string, GroupResult> by_group;
  const double h = 1e-5;
  for (emb::Parameter* p : params) {
    GroupResult& gr = by_group.try_emplace(group_of(p->name), GroupResult{group_of(p->name), 0.0, true})
                          .first->second;
    for (std::size_t i = 0; i < p->value.v.size(); ++i) {
      double saved = p->value.v[i];
      p->value.v[i] = saved + h;
      double up = value();
      p->value.v[i] = saved - h;
      double down = value();
      p->value.v[i] = saved;
      double fd = (up - down) / (2.0 * h);
      double an = p->grad.v[i];
      double err = std::abs(fd - an);
      if (err <= opt.floor) continue;
      double rel = err / std::max(std::abs(fd), std::abs(an));
      gr.max_rel_err = std::max(gr.max_rel_err, rel);
      if (rel > opt.tolerance) gr.pass = false;
    }
  }
  std::vector<GroupResult> out;
  for (auto& [name, gr] : by_group) out.push_back(gr);
  return out;
}

Report run_suite(const ExperimentConfig& cfg, const Options& opt) {
  std::vector<FamilySpec> plan;
  const LossToggles& on = cfg.lsm.losses;
  if (on.grounding) plan.push_back({"grounding", Family::grounding, false, ParamFilter::no_fusion});
  if (on.icm) plan.push_back({"icm", Family::icm, false, ParamFilter::all});
  if (on.mlm) plan.push_back({"mlm", Family::mlm, false, ParamFilter::all});
  if (on.consistency) {
    plan.push_back({"consistency-fixed-target", Family::consistency, false, ParamFilter::fusion_only});
    plan.push_back({"consistency-bidirectional", Family::consistency, true, ParamFilter::all});
  }
  if (on.grounding || on.icm || on.mlm || on.consistency) {
    if (on.consistency) {
      plan.push_back({"lsm-total-fixed-target", Family::lsm_total, false, ParamFilter::fusion_only});
      plan.push_back({"lsm-total-bidirectional", Family::lsm_total, true, ParamFilter::all});
    } else {
      plan.push_back({"lsm-total", Family::lsm_total, false, ParamFilter::all});
    }
  }
  plan.push_back({"stt", Family::stt, false, ParamFilter::no_fusion});

  Report report;
  report.tolerance = opt.tolerance;
  report.floor = opt.floor;

  Rng suite_rng(opt.seed);
  for (std::size_t f = 0; f < plan.size(); ++f) {
    const FamilySpec& spec = plan[f];
    bool heavy = spec.fam != Family::grounding && spec.fam != Family::stt;
    FamilyResult fr;
    fr.family = spec.name;
    std::map<std::string, GroupResult> merged;

    for (std::size_t k = 0; k < opt.instances; ++k) {
      Rng inst_rng = suite_rng.fork(f * 1000 + k);
      Instance inst = make_instance(inst_rng, heavy);

      {
        diff::Tape tape;
        emb::Binding bind(tape);
        diff::Var loss = family_loss(spec.fam, inst, bind, spec.bidirectional);
        tape.backward(loss);
        inst.model.zero_grads();
        bind.harvest();
      }
      if (!opt.corrupt_group.empty()) {
        for (emb::Parameter* p : inst.model.parameters())
          if (group_of(p->name) == opt.corrupt_group && !p->grad.v.empty()) p->grad.v[0] += 1e-2;
      }

      std::vector<emb::Parameter*> checked;
      for (emb::Parameter* p : inst.model.parameters())
        if (admitted(spec.filter, group_of(p->name))) checked.push_back(p);

      auto value = [&]() {
        diff::Tape tape;
        emb::Binding bind(tape);
        return family_loss(spec.fam, inst, bind, spec.bidirectional).value().v[0];
      };
      for (const GroupResult& gr : check_gradients(value, checked, opt)) {
        GroupResult& slot = merged.try_emplace(gr.group, GroupResult{gr.group, 0.0, true}).first->second;
        slot.max_rel_err = std::max(slot.max_rel_err, gr.max_rel_err);
        slot.pass = slot.pass && gr.pass;
      }
      ++fr.instances;
    }

    for (auto& [name, gr] : merged) {
      fr.pass = fr.pass && gr.pass;
      fr.groups.push_back(gr);
    }
    report.pass = report.pass && fr.pass;
    report.families.push_back(std::move(fr));
  }
  return report;
}

ordered_json Report::to_json() const {
  ordered_json j;
  j["tolerance"] = tolerance;
  j["floor"] = floor;
  j["pass"] = pass;
  ordered_json fams = ordered_json::array();
  for (const FamilyResult& fr : families) {
    ordered_json fj;
    fj["family"] = fr.family;
    fj["instances"] = fr.instances;
    fj["pass"] = fr.pass;
    ordered_json groups = ordered_json::array();
    for (const GroupResult& gr : fr.groups) {
      ordered_json gj;
      gj["group"] = gr.group;
      gj["max_rel_err"] = gr.max_rel_err;
      gj["pass"] = gr.pass;
      groups.push_back(std::move(gj));
    }
    fj["groups"] = std::move(groups);
    fams.push_back(std::move(fj));
  }
  j["families"] = std::move(fams);
  return j;
}

}  // namespace locov::gradcheck
