#include "core/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>
#include <utility>

#include "core/checkpoint.hpp"
#include "core/dataset_io.hpp"
#include "core/detector.hpp"
#include "core/error.hpp"
#include "core/rng.hpp"
#include "core/trainer.hpp"

namespace locov::pipeline {

using nlohmann::ordered_json;

DirLock::DirLock(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("io-error", "cannot create output directory " + dir + ": " + ec.message());
  path_ = dir + "/.lock";
  int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      fail("locked-output", "output directory " + dir + " is locked by another run (remove " +
                                path_ + " if that run is dead)");
    fail("io-error", "cannot create lock file " + path_);
  }
  ::close(fd);
}

DirLock::~DirLock() {
  if (!path_.empty()) ::unlink(path_.c_str());
}

namespace {

void write_text(const std::string& path, std::string text) {
  if (text.empty() || text.back() != '\n') text += '\n';
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io-error", "cannot open " + path + " for writing");
  out << text;
  out.flush();
  if (!out) fail("io-error", "write failed: " + path);
}

// The config travels inside checkpoints; the directory a run happened to
// write into is not part of the experiment and would break byte-level
// reproducibility across differently named runs.
ExperimentConfig detach_output_dir(ExperimentConfig cfg) {
  cfg.output_dir.clear();
  return cfg;
}

void require_world_match(const ExperimentConfig& cfg, const synth::World& world) {
  ordered_json expect = synth::world_config_to_json(cfg.world);
  ordered_json actual = synth::world_config_to_json(world.cfg);
  if (expect == actual) return;
  for (const auto& [key, value] : expect.items())
    if (actual.contains(key) && actual[key] != value)
      fail("invalid-config", "config world." + key + " = " + value.dump() +
                                 " does not match the dataset manifest (" + actual[key].dump() + ")");
  fail("invalid-config", "config world section does not match the dataset manifest");
}

Model init_model(const ExperimentConfig& cfg, const synth::World& world) {
  Model model;
  Rng root(cfg.seed);
  Rng init = root.fork(1);
  model.init(cfg.model_dims(world.vocab.size()), init);
  return model;
}

Model run_lsm(const ExperimentConfig& cfg, const synth::World& world, train::Sgd& opt,
              const train::MetricsSink& metrics, const train::CheckpointSink& periodic = nullptr) {
  Model model = init_model(cfg, world);
  FreezePolicy policy;
  if (!cfg.lsm.train_embeddings) policy.frozen.insert("embed");
  model.apply_freeze(policy);
  train::train_lsm(model, world, cfg, opt, metrics, periodic);
  return model;
}

std::size_t eval_threads(std::size_t images) {
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("LOCOV_THREADS")) {
    char* end = nullptr;
    unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || v == 0)
      fail("invalid-config", "LOCOV_THREADS must be a positive integer, got '" + std::string(env) + "'");
    n = static_cast<std::size_t>(v);
  }
  if (n > images) n = images;
  return n == 0 ? 1 : n;
}

using SetupList = std::vector<std::pair<std::string, det::Setup>>;

SetupList setup_list(const std::vector<std::string>& names) {
  bool want_all = names.empty();
  for (const std::string& n : names) {
    if (n == "all") {
      want_all = true;
    } else if (n != "novel" && n != "known" && n != "generalized") {
      fail("invalid-config", "unknown setup '" + n + "' (expected novel, known, generalized, or all)");
    }
  }
  auto wanted = [&](const char* n) {
    return want_all || std::find(names.begin(), names.end(), n) != names.end();
  };
  SetupList out;
  if (wanted("novel")) out.emplace_back("novel", det::Setup::novel);
  if (wanted("known")) out.emplace_back("known", det::Setup::known);
  if (wanted("generalized")) out.emplace_back("generalized", det::Setup::generalized);
  return out;
}

// Detections for every image of a split, one list per setup. Images are
// sharded across threads by stride; each slot is written by exactly one
// thread, so thread count never changes the result.
std::map<std::string, std::vector<det::DetectionSet>> detect_split(
    const Model& model, const synth::Split& split, const det::ClassCatalog& catalog,
    const ExperimentConfig& cfg, const SetupList& setups) {
  std::map<std::string, std::vector<det::DetectionSet>> out;
  for (const auto& [name, setup] : setups) out[name].resize(split.images.size());

  const std::size_t n = split.images.size();
  const std::size_t threads = eval_threads(n);
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < n; i += threads) {
      regions::RegionSet rs = train::box_regions_for(split.images[i], cfg);
      for (const auto& [name, setup] : setups)
        out.at(name)[i] =
            det::detect(model, rs, catalog, setup, cfg.eval.score_threshold, cfg.eval.nms_iou);
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (std::thread& t : pool) t.join();
  }
  return out;
}

std::vector<eval::ImageGroundTruth> ground_truth(const synth::Split& split) {
  std::vector<eval::ImageGroundTruth> gts(split.images.size());
  for (std::size_t i = 0; i < split.images.size(); ++i)
    for (const synth::SynthObject& obj : split.images[i].objects)
      gts[i].boxes.push_back({obj.box, obj.class_id});
  return gts;
}

eval::EvalReport evaluate_model(const Model& model, const synth::World& world,
                                const synth::Split& split, const ExperimentConfig& cfg,
                                const SetupList& setups) {
  det::ClassCatalog catalog = det::ClassCatalog::build(world.classes, model.table);
  auto dets = detect_split(model, split, catalog, cfg, setups);
  return eval::evaluate(dets, ground_truth(split), catalog);
}

// Captures enough to diagnose an aborted run: the error and the last
// metrics record that made it out.
void dump_abort_state(const std::string& out_dir, const Error& e, const ordered_json& last_record) {
  ordered_json j;
  j["code"] = e.code();
  j["message"] = e.what();
  j["last_record"] = last_record;
  write_text(out_dir + "/state_dump.json", j.dump(2));
}

}  // namespace

ordered_json cmd_synth(const ExperimentConfig& cfg, const std::string& dir) {
  cfg.validate();
  DirLock lock(dir);
  synth::World world = synth::generate_world(cfg.world);
  synth::write_dataset(world, dir);
  ordered_json stats = synth::world_statistics(world);
  write_text(dir + "/stats.json", stats.dump(2));
  return stats;
}

ordered_json cmd_train_lsm(ExperimentConfig cfg, const std::string& dataset_dir,
                           const std::string& out_dir) {
  cfg = detach_output_dir(std::move(cfg));
  cfg.validate();
  synth::World world = synth::load_dataset(dataset_dir);
  require_world_match(cfg, world);
  DirLock lock(out_dir);

  std::ofstream log(out_dir + "/lsm_metrics.jsonl", std::ios::binary);
  if (!log) fail("io-error", "cannot open " + out_dir + "/lsm_metrics.jsonl for writing");
  ordered_json last;
  auto sink = [&](const ordered_json& rec) {
    log << rec.dump() << "\n";
    last = rec;
  };
  train::CheckpointSink periodic = nullptr;
  if (cfg.lsm.checkpoint_every > 0)
    periodic = [&](std::size_t step, Model& m, train::Sgd& o) {
      ckpt::save_checkpoint(train::snapshot("lsm", step, cfg, m, &o),
                            out_dir + "/lsm-step" + std::to_string(step) + ".ckpt");
    };

  train::Sgd opt;
  Model model;
  try {
    model = run_lsm(cfg, world, opt, sink, periodic);
  } catch (const Error& e) {
    log.flush();
    if (e.code() == "non-finite-loss") dump_abort_state(out_dir, e, last);
    throw;
  }
  log.flush();
  if (!log) fail("io-error", "write failed: " + out_dir + "/lsm_metrics.jsonl");

  ckpt::save_checkpoint(train::snapshot("lsm", cfg.lsm.steps, cfg, model, &opt),
                        out_dir + "/lsm.ckpt");

  ordered_json summary;
  summary["stage"] = "lsm";
  summary["steps"] = cfg.lsm.steps;
  summary["checkpoint"] = out_dir + "/lsm.ckpt";
  summary["metrics"] = out_dir + "/lsm_metrics.jsonl";
  summary["final"] = last;
  return summary;
}

ordered_json cmd_train_stt(std::optional<ExperimentConfig> cfg_in, const std::string& dataset_dir,
                           const std::string& checkpoint_path, const std::string& out_dir) {
  ckpt::Checkpoint ck = ckpt::load_checkpoint(checkpoint_path);
  if (ck.stage != "lsm")
    fail("wrong-stage-checkpoint",
         "second-stage training starts from an lsm checkpoint, got stage '" + ck.stage + "'");
  ExperimentConfig cfg =
      detach_output_dir(cfg_in ? std::move(*cfg_in) : ExperimentConfig::from_json(ck.config));
  cfg.validate();
  synth::World world = synth::load_dataset(dataset_dir);
  require_world_match(cfg, world);
  DirLock lock(out_dir);

  Model model = init_model(cfg, world);
  train::restore(ck, model, nullptr);

  std::ofstream log(out_dir + "/stt_metrics.jsonl", std::ios::binary);
  if (!log) fail("io-error", "cannot open " + out_dir + "/stt_metrics.jsonl for writing");
  ordered_json last;
  auto sink = [&](const ordered_json& rec) {
    log << rec.dump() << "\n";
    last = rec;
  };

  train::Sgd opt;
  train::SttResult result;
  try {
    result = train::train_stt(model, world, cfg, opt, sink);
  } catch (const Error& e) {
    log.flush();
    if (e.code() == "non-finite-loss") dump_abort_state(out_dir, e, last);
    throw;
  }
  log.flush();
  if (!log) fail("io-error", "write failed: " + out_dir + "/stt_metrics.jsonl");

  std::size_t step = result.best_val_ap >= 0.0 ? result.best_step : result.steps_run;
  ckpt::save_checkpoint(train::snapshot("stt", step, cfg, model, &opt), out_dir + "/stt.ckpt");

  ordered_json summary;
  summary["stage"] = "stt";
  summary["steps_run"] = result.steps_run;
  summary["best_step"] = result.best_step;
  summary["best_val_generalized_ap"] =
      result.best_val_ap >= 0.0 ? ordered_json(result.best_val_ap) : ordered_json(nullptr);
  summary["checkpoint"] = out_dir + "/stt.ckpt";
  summary["metrics"] = out_dir + "/stt_metrics.jsonl";
  summary["final"] = last;
  return summary;
}

eval::EvalReport cmd_evaluate(std::optional<ExperimentConfig> cfg_in,
                              const std::string& checkpoint_path, const std::string& dataset_dir,
                              const std::string& split, const std::vector<std::string>& setups,
                              const std::string& out_dir) {
  ckpt::Checkpoint ck = ckpt::load_checkpoint(checkpoint_path);
  if (ck.stage != "stt")
    fail("wrong-stage-checkpoint",
         "evaluation needs an stt checkpoint, got stage '" + ck.stage + "'");
  ExperimentConfig cfg =
      detach_output_dir(cfg_in ? std::move(*cfg_in) : ExperimentConfig::from_json(ck.config));
  cfg.validate();
  synth::World world = synth::load_dataset(dataset_dir);
  require_world_match(cfg, world);
  const synth::Split& sp = world.split(split);

  Model model = init_model(cfg, world);
  train::restore(ck, model, nullptr);

  eval::EvalReport report = evaluate_model(model, world, sp, cfg, setup_list(setups));
  if (!out_dir.empty()) {
    DirLock lock(out_dir);
    write_text(out_dir + "/eval.json", report.to_json());
    write_text(out_dir + "/eval.csv", report.to_csv());
  }
  return report;
}

gradcheck::Report cmd_gradcheck(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  gradcheck::Options opt;
  opt.seed = cfg.seed;
  gradcheck::Report report = gradcheck::run_suite(cfg, opt);
  if (!out_dir.empty()) {
    DirLock lock(out_dir);
    write_text(out_dir + "/gradcheck.json", report.to_json().dump(2));
  }
  return report;
}

namespace {

// One cached computation shared by several sweep cells. A failure is cached
// too, so dependent cells report it without repeating the work.
template <typename T>
struct CellCache {
  bool done = false;
  bool ok = false;
  std::string code, message;
  T value{};

  template <typename Fn>
  const T& get(Fn&& compute) {
    if (!done) {
      done = true;
      try {
        value = compute();
        ok = true;
      } catch (const Error& e) {
        code = e.code();
        message = e.what();
      } catch (const std::exception& e) {
        code = "runtime";
        message = e.what();
      }
    }
    if (!ok) fail(code, message);
    return value;
  }
};

std::string csv_number(const ordered_json& v) { return v.is_null() ? "" : v.dump(); }

}  // namespace

ordered_json cmd_ablate(ExperimentConfig cfg, const std::string& dataset_dir,
                        const std::string& out_dir) {
  cfg = detach_output_dir(std::move(cfg));
  cfg.validate();
  synth::World world = synth::load_dataset(dataset_dir);
  require_world_match(cfg, world);
  std::optional<DirLock> lock;
  if (!out_dir.empty()) lock.emplace(out_dir);

  const SetupList setups = setup_list({});
  const train::MetricsSink quiet = [](const ordered_json&) {};

  // The first stage depends only on (region mode, consistency); the tuned
  // no-first-stage model depends on neither. Both are shared across cells.
  std::map<std::string, CellCache<ckpt::Checkpoint>> lsm_cache;
  CellCache<eval::EvalReport> stt_only;

  auto first_stage = [&](const ExperimentConfig& cell) -> const ckpt::Checkpoint& {
    std::string key =
        region_mode_name(cell.regions.mode) + (cell.lsm.losses.consistency ? "|cons" : "|plain");
    return lsm_cache[key].get([&] {
      train::Sgd opt;
      Model model = run_lsm(cell, world, opt, quiet);
      return train::snapshot("lsm", cell.lsm.steps, cell, model, nullptr);
    });
  };

  auto cell_report = [&](const ExperimentConfig& cell, const std::string& stage) {
    if (stage == "stt-only")
      return stt_only.get([&] {
        Model model = init_model(cell, world);
        train::Sgd opt;
        train::train_stt(model, world, cell, opt, quiet);
        return evaluate_model(model, world, world.test, cell, setups);
      });
    const ckpt::Checkpoint& ck = first_stage(cell);
    Model model = init_model(cell, world);
    train::restore(ck, model, nullptr);
    if (stage == "lsm-only") return evaluate_model(model, world, world.test, cell, setups);
    train::Sgd opt;
    train::train_stt(model, world, cell, opt, quiet);
    return evaluate_model(model, world, world.test, cell, setups);
  };

  ordered_json rows = ordered_json::array();
  for (const std::string& mode : cfg.ablate.region_modes) {
    for (bool cons : cfg.ablate.consistency) {
      for (const std::string& stage : cfg.ablate.stages) {
        ExperimentConfig cell = cfg;
        cell.regions.mode = region_mode_from_name(mode);
        cell.lsm.losses.consistency = cons;

        ordered_json row;
        row["regions"] = mode;
        row["consistency"] = cons;
        row["stage"] = stage;
        for (const char* col : {"novel_ap50", "known_ap50", "generalized_ap50", "novel_ap",
                                "known_ap", "generalized_ap"})
          row[col] = nullptr;
        try {
          eval::EvalReport report = cell_report(cell, stage);
          for (const auto& [name, scores] : report.setups) {
            row[name + "_ap50"] = scores.ap50;
            row[name + "_ap"] = scores.ap;
          }
          row["status"] = "ok";
          row["error"] = "";
        } catch (const Error& e) {
          row["status"] = "error";
          row["error"] = e.code() + std::string(": ") + e.what();
        } catch (const std::exception& e) {
          row["status"] = "error";
          row["error"] = e.what();
        }
        rows.push_back(std::move(row));
      }
    }
  }

  if (!out_dir.empty()) {
    std::string csv =
        "regions,consistency,stage,status,novel_ap50,known_ap50,generalized_ap50,novel_ap,known_ap,"
        "generalized_ap,error\n";
    for (const ordered_json& row : rows) {
      csv += row["regions"].get<std::string>();
      csv += row["consistency"].get<bool>() ? ",on," : ",off,";
      csv += row["stage"].get<std::string>();
      csv += "," + row["status"].get<std::string>();
      for (const char* col : {"novel_ap50", "known_ap50", "generalized_ap50", "novel_ap",
                              "known_ap", "generalized_ap"})
        csv += "," + csv_number(row[col]);
      std::string err = row["error"].get<std::string>();
      for (char& c : err)
        if (c == ',' || c == '\n') c = ';';
      csv += "," + err + "\n";
    }
    write_text(out_dir + "/ablation.csv", csv);
  }
  return rows;
}

}  // namespace locov::pipeline
