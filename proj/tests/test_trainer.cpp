#include <doctest.h>

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/checkpoint.hpp"
#include "core/config.hpp"
#include "core/error.hpp"
#include "core/model.hpp"
#include "core/rng.hpp"
#include "core/synthworld.hpp"
#include "core/trainer.hpp"

using namespace locov;
using nlohmann::ordered_json;

namespace {

// a world small enough that every trainer path runs in milliseconds
synth::WorldConfig pocket_world() {
  synth::WorldConfig w;
  w.known_classes = 5;
  w.novel_classes = 2;
  w.latent_dim = 8;
  w.feature_dim = 6;
  w.train_images = 16;
  w.val_images = 6;
  w.test_images = 4;
  w.objects_min = 1;
  w.objects_max = 3;
  w.caption_min = 6;
  w.caption_max = 10;
  w.distractor_tokens = 8;
  w.grid_size = 3;
  w.noise_proposals = 4;
  w.seed = 33;
  return w;
}

ExperimentConfig pocket_cfg() {
  ExperimentConfig cfg;
  cfg.seed = 11;
  cfg.world = pocket_world();
  cfg.embed_dim = 8;
  cfg.encoder_stages = 2;
  cfg.fusion_layers = 2;
  cfg.fusion_heads = 2;
  cfg.fusion_ffn_hidden = 16;
  cfg.lsm.steps = 3;
  cfg.lsm.batch = 3;
  cfg.stt.steps = 4;
  cfg.stt.batch_images = 2;
  cfg.stt.eval_every = 0;
  cfg.stt.freeze = {"encoder/stage1", "proj", "embed"};
  return cfg;
}

Model fresh_model(const ExperimentConfig& cfg, const synth::World& world) {
  Model model;
  Rng root(cfg.seed);
  Rng init = root.fork(1);
  model.init(cfg.model_dims(world.vocab.size()), init);
  return model;
}

std::vector<Tensor> param_values(Model& model) {
  std::vector<Tensor> out;
  for (emb::Parameter* p : model.parameters()) out.push_back(p->value);
  return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) && a.v == b.v;
}

std::string thrown_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  } catch (...) {
    return "other";
  }
  return "none";
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("sgd momentum arithmetic by hand") {
    emb::Parameter moving, parked;
    moving.init("w", Tensor::full(1, 2, 1.0));
    parked.init("p", Tensor::full(1, 2, 5.0));
    parked.trainable = false;

    train::Sgd opt;
    CHECK(opt.momentum() == 0.9);

    moving.grad.v = {0.5, -1.0};
    parked.grad.v = {7.0, 7.0};
    opt.step({&moving, &parked}, 0.1);

    // v = g, w -= lr * v
    CHECK(moving.value.v[0] == 1.0 - 0.1 * 0.5);
    CHECK(moving.value.v[1] == 1.0 - 0.1 * -1.0);
    CHECK(parked.value.v[0] == 5.0);
    CHECK(opt.velocity().count("w") == 1);
    CHECK(opt.velocity().count("p") == 0);

    moving.grad.v = {0.25, 0.25};
    opt.step({&moving, &parked}, 0.1);

    // v = 0.9 * v + g this time
    double v0 = 0.9 * 0.5 + 0.25;
    double v1 = 0.9 * -1.0 + 0.25;
    CHECK(moving.value.v[0] == 1.0 - 0.1 * 0.5 - 0.1 * v0);
    CHECK(moving.value.v[1] == 1.0 + 0.1 * 1.0 - 0.1 * v1);
    CHECK(opt.velocity().at("w").v[0] == v0);
    CHECK(opt.velocity().at("w").v[1] == v1);
  }

  TEST_CASE("labeling follows the overlap threshold") {
    ExperimentConfig cfg = pocket_cfg();

    synth::SynthImage img;
    img.id = 0;
    img.objects.push_back({regions::Box{0, 0, 10, 10}, 3});
    // descending objectness keeps the selection order equal to input order
    img.proposals.push_back({regions::Box{0, 0, 10, 10}, 0.95});    // IoU 1.0
    img.proposals.push_back({regions::Box{0, 0, 10, 6}, 0.90});     // IoU 0.6
    img.proposals.push_back({regions::Box{0, 0, 10, 4.5}, 0.85});   // IoU 0.45
    img.proposals.push_back({regions::Box{40, 40, 50, 50}, 0.80});  // IoU 0
    img.proposals.push_back({regions::Box{0, 0, 10, 10}, 0.50});    // below objectness cut
    img.proposal_features = Tensor::full(5, cfg.world.feature_dim, 0.1);

    det::LabeledRegions lab = train::label_regions(img, cfg, 99);
    REQUIRE(lab.labels.size() == 4);
    CHECK(lab.labels[0] == 3);
    CHECK(lab.labels[1] == 3);
    CHECK(lab.labels[2] == 99);
    CHECK(lab.labels[3] == 99);
    CHECK(lab.raw_features.rows() == 4);

    // a stricter overlap bar demotes the 0.6 proposal to background
    cfg.stt.label_iou = 0.7;
    det::LabeledRegions strict = train::label_regions(img, cfg, 99);
    CHECK(strict.labels[0] == 3);
    CHECK(strict.labels[1] == 99);
  }

  TEST_CASE("region providers wire the config through") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.regions.box_cap = 2;

    synth::SynthImage img;
    img.proposals.push_back({regions::Box{0, 0, 4, 4}, 0.8});
    img.proposals.push_back({regions::Box{1, 1, 5, 5}, 0.95});
    img.proposals.push_back({regions::Box{2, 2, 6, 6}, 0.9});
    img.proposals.push_back({regions::Box{3, 3, 7, 7}, 0.6});
    img.proposal_features = Tensor(4, cfg.world.feature_dim);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < cfg.world.feature_dim; ++c)
        img.proposal_features.at(r, c) = static_cast<double>(r);

    regions::RegionSet rs = train::box_regions_for(img, cfg);
    REQUIRE(rs.count() == 2);  // 0.6 fails the threshold, cap drops the 0.8
    CHECK(rs.boxes[0].x1 == 1);
    CHECK(rs.boxes[1].x1 == 2);
    CHECK(rs.features.at(0, 0) == 1.0);
    CHECK(rs.features.at(1, 0) == 2.0);

    std::size_t g = cfg.world.grid_size;
    img.grid_features = Tensor::full(g * g, cfg.world.feature_dim, 0.5);
    img.grid_features.shape = {g, g, cfg.world.feature_dim};
    regions::RegionSet grid = train::grid_regions_for(img, cfg);
    CHECK(grid.count() == g * g);
    CHECK(grid.kind == regions::RegionKind::grid);
    double cell = cfg.world.image_size / static_cast<double>(g);
    CHECK(grid.boxes[0].x2 == doctest::Approx(cell));
    CHECK(grid.boxes[g * g - 1].x2 == doctest::Approx(cfg.world.image_size));
  }

  TEST_CASE("zero lsm steps leave the initialization untouched") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.lsm.steps = 0;
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    std::vector<Tensor> before = param_values(model);

    train::Sgd opt;
    std::size_t records = 0;
    train::train_lsm(model, world, cfg, opt, [&](const ordered_json&) { ++records; });

    CHECK(records == 0);
    std::vector<Tensor> after = param_values(model);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
  }

  TEST_CASE("lsm metrics carry the fixed key set and every loss moves the total") {
    ExperimentConfig cfg = pocket_cfg();
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    train::Sgd opt;

    std::vector<ordered_json> recs;
    train::train_lsm(model, world, cfg, opt, [&](const ordered_json& r) { recs.push_back(r); });

    REQUIRE(recs.size() == cfg.lsm.steps);
    const std::vector<std::string> keys{"step",     "lr",      "loss_grounding", "loss_icm",
                                        "loss_mlm", "loss_consistency", "loss_total"};
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const ordered_json& r = recs[i];
      CHECK(r.size() == keys.size());
      for (const std::string& k : keys) CHECK(r.contains(k));
      CHECK(r["step"] == i + 1);
      CHECK(r["lr"] == cfg.lsm.schedule.rate_at(i + 1));
      double total = ((r["loss_grounding"].get<double>() + r["loss_icm"].get<double>()) +
                      r["loss_mlm"].get<double>()) +
                     r["loss_consistency"].get<double>();
      CHECK(r["loss_total"].get<double>() == total);
    }
  }

  TEST_CASE("disabled losses log zero and leave their parameters alone") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.lsm.losses.icm = false;
    cfg.lsm.losses.mlm = false;
    cfg.lsm.losses.consistency = false;
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    std::vector<Tensor> before = param_values(model);
    std::vector<emb::Parameter*> params = model.parameters();

    train::Sgd opt;
    std::vector<ordered_json> recs;
    train::train_lsm(model, world, cfg, opt, [&](const ordered_json& r) { recs.push_back(r); });

    bool encoder_moved = false;
    for (const ordered_json& r : recs) {
      CHECK(r["loss_icm"].get<double>() == 0.0);
      CHECK(r["loss_mlm"].get<double>() == 0.0);
      CHECK(r["loss_consistency"].get<double>() == 0.0);
      CHECK(r["loss_grounding"].get<double>() > 0.0);
    }
    // grounding never touches the cross-attention stack, so those parameters
    // must come out bit-identical while the encoder path trains
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->name.rfind("fusion/", 0) == 0)
        CHECK(bitwise_equal(before[i], params[i]->value));
      else if (params[i]->name.rfind("encoder/", 0) == 0)
        encoder_moved = encoder_moved || !bitwise_equal(before[i], params[i]->value);
    }
    CHECK(encoder_moved);
  }

  TEST_CASE("a fixed batch overfits to less than half the starting loss") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.world.train_images = 8;
    cfg.lsm.batch = 8;  // batch == split, the same eight pairs every step
    cfg.lsm.steps = 200;
    cfg.lsm.train_embeddings = true;  // both sides free, as when memorizing
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    FreezePolicy policy;
    if (!cfg.lsm.train_embeddings) policy.frozen.insert("embed");
    model.apply_freeze(policy);

    train::Sgd opt;
    double first = 0.0, last = 0.0;
    train::train_lsm(model, world, cfg, opt, [&](const ordered_json& r) {
      if (r["step"] == 1) first = r["loss_total"].get<double>();
      last = r["loss_total"].get<double>();
    });

    CHECK(first > 0.0);
    CHECK(last <= 0.5 * first);
  }

  TEST_CASE("snapshot and restore round-trip the exact training state") {
    ExperimentConfig cfg = pocket_cfg();
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    train::Sgd opt;
    train::train_lsm(model, world, cfg, opt, nullptr);

    ckpt::Checkpoint ck = train::snapshot("lsm", cfg.lsm.steps, cfg, model, &opt);
    std::size_t n_params = model.parameters().size();
    CHECK(ck.stage == "lsm");
    CHECK(ck.step == cfg.lsm.steps);
    CHECK(ck.tensors.size() == n_params + opt.velocity().size());

    std::vector<Tensor> want = param_values(model);
    auto want_velocity = opt.velocity();

    // scribble over the live state, then restore both halves
    for (emb::Parameter* p : model.parameters())
      for (double& x : p->value.v) x += 1.25;
    train::Sgd opt2;
    train::restore(ck, model, &opt2);

    std::vector<Tensor> got = param_values(model);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(bitwise_equal(want[i], got[i]));
    REQUIRE(opt2.velocity().size() == want_velocity.size());
    for (const auto& [name, v] : want_velocity) CHECK(bitwise_equal(v, opt2.velocity().at(name)));

    // without an optimizer the parameters still land
    for (emb::Parameter* p : model.parameters())
      for (double& x : p->value.v) x -= 0.5;
    train::restore(ck, model, nullptr);
    got = param_values(model);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(bitwise_equal(want[i], got[i]));
  }

  TEST_CASE("restore rejects incomplete or alien checkpoints") {
    ExperimentConfig cfg = pocket_cfg();
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    train::Sgd opt;
    ckpt::Checkpoint full = train::snapshot("lsm", 0, cfg, model, nullptr);

    ckpt::Checkpoint missing = full;
    missing.tensors.pop_back();
    CHECK(thrown_code([&] { train::restore(missing, model, nullptr); }) == "shape-mismatch");

    ckpt::Checkpoint alien = full;
    alien.tensors.emplace_back("no/such/parameter", Tensor::zeros(1, 1));
    CHECK(thrown_code([&] { train::restore(alien, model, nullptr); }) == "shape-mismatch");

    ckpt::Checkpoint bent = full;
    bent.tensors[0].second = Tensor::zeros(1, 1);
    CHECK(thrown_code([&] { train::restore(bent, model, nullptr); }) == "shape-mismatch");

    ckpt::Checkpoint ghost = full;
    ghost.tensors.emplace_back("opt/velocity/no/such/parameter", Tensor::zeros(1, 1));
    CHECK(thrown_code([&] { train::restore(ghost, model, &opt); }) == "shape-mismatch");
  }

  TEST_CASE("stt honors the freeze list bitwise") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.stt.freeze = {"encoder/stage1", "encoder/stage2", "proj", "embed"};  // everything it touches
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    std::vector<Tensor> before = param_values(model);

    train::Sgd opt;
    std::vector<ordered_json> recs;
    train::SttResult result =
        train::train_stt(model, world, cfg, opt, [&](const ordered_json& r) { recs.push_back(r); });

    CHECK(result.steps_run == cfg.stt.steps);
    CHECK(result.best_step == cfg.stt.steps);
    CHECK(result.best_val_ap == -1.0);
    REQUIRE(recs.size() == cfg.stt.steps);
    for (const ordered_json& r : recs) {
      CHECK(r.size() == 4);
      CHECK(r.contains("step"));
      CHECK(r.contains("lr"));
      CHECK(r["loss_stt"].get<double>() > 0.0);
      CHECK(r["val_generalized_ap"].is_null());
    }

    std::vector<emb::Parameter*> params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(bitwise_equal(before[i], params[i]->value));
  }

  TEST_CASE("stt trains exactly the unfrozen groups") {
    ExperimentConfig cfg = pocket_cfg();  // freezes stage1 + proj + embed, stage2 trains
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    std::vector<Tensor> before = param_values(model);

    train::Sgd opt;
    train::train_stt(model, world, cfg, opt, nullptr);

    std::vector<emb::Parameter*> params = model.parameters();
    bool stage2_moved = false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string& name = params[i]->name;
      if (name.rfind("encoder/stage2", 0) == 0)
        stage2_moved = stage2_moved || !bitwise_equal(before[i], params[i]->value);
      else if (name.rfind("encoder/stage1", 0) == 0 || name.rfind("proj", 0) == 0 ||
               name.rfind("embed", 0) == 0 || name.rfind("fusion/", 0) == 0)
        CHECK(bitwise_equal(before[i], params[i]->value));
    }
    CHECK(stage2_moved);
  }

  TEST_CASE("early stopping ends at the best validation step") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.stt.steps = 12;
    cfg.stt.eval_every = 2;
    cfg.stt.patience = 2;
    synth::World world = synth::generate_world(cfg.world);

    Model stopped = fresh_model(cfg, world);
    train::Sgd opt;
    std::size_t vals_seen = 0;
    train::SttResult result =
        train::train_stt(stopped, world, cfg, opt, [&](const ordered_json& r) {
          if (!r["val_generalized_ap"].is_null()) {
            ++vals_seen;
            double ap = r["val_generalized_ap"].get<double>();
            CHECK(ap >= 0.0);
            CHECK(ap <= 1.0);
          } else {
            CHECK(r["step"].get<std::size_t>() % cfg.stt.eval_every != 0);
          }
        });

    CHECK(vals_seen == result.steps_run / cfg.stt.eval_every);
    CHECK(result.best_val_ap >= 0.0);
    CHECK(result.best_step <= result.steps_run);
    CHECK(result.best_step % cfg.stt.eval_every == 0);

    // replaying the run for exactly best_step steps with validation off must
    // reproduce the surviving parameters bit for bit
    ExperimentConfig replay_cfg = cfg;
    replay_cfg.stt.steps = result.best_step;
    replay_cfg.stt.eval_every = 0;
    Model replay = fresh_model(replay_cfg, world);
    train::Sgd opt2;
    train::train_stt(replay, world, replay_cfg, opt2, nullptr);

    std::vector<emb::Parameter*> a = stopped.parameters();
    std::vector<emb::Parameter*> b = replay.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i]->value, b[i]->value));
  }

  TEST_CASE("periodic checkpoints fire between steps, never on the last") {
    ExperimentConfig cfg = pocket_cfg();
    cfg.lsm.steps = 5;
    cfg.lsm.checkpoint_every = 2;
    synth::World world = synth::generate_world(cfg.world);
    Model model = fresh_model(cfg, world);
    train::Sgd opt;

    std::vector<std::size_t> fired;
    train::train_lsm(model, world, cfg, opt, nullptr,
                     [&](std::size_t step, Model&, train::Sgd&) { fired.push_back(step); });
    CHECK(fired == std::vector<std::size_t>{2, 4});

    cfg.lsm.steps = 4;
    Model model2 = fresh_model(cfg, world);
    train::Sgd opt2;
    fired.clear();
    train::train_lsm(model2, world, cfg, opt2, nullptr,
                     [&](std::size_t step, Model&, train::Sgd&) { fired.push_back(step); });
    CHECK(fired == std::vector<std::size_t>{2});
  }

  TEST_CASE("training is bit-reproducible") {
    ExperimentConfig cfg = pocket_cfg();
    synth::World world = synth::generate_world(cfg.world);

    auto run = [&](std::string& log) {
      Model model = fresh_model(cfg, world);
      train::Sgd opt;
      train::train_lsm(model, world, cfg, opt, [&](const ordered_json& r) { log += r.dump() + "\n"; });
      train::train_stt(model, world, cfg, opt, [&](const ordered_json& r) { log += r.dump() + "\n"; });
      return param_values(model);
    };

    std::string log_a, log_b;
    std::vector<Tensor> a = run(log_a);
    std::vector<Tensor> b = run(log_b);
    CHECK(log_a == log_b);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i], b[i]));
  }
}
