#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "locov.h"

namespace {

// RAII around the opaque config handle.
struct Config {
  locov_config* ptr = nullptr;
  ~Config() { locov_config_free(ptr); }
  Config() = default;
  Config(const Config&) = delete;
  Config& operator=(const Config&) = delete;
};

// RAII around strings the library hands back.
struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { locov_string_free(ptr); }
};

int report_error(locov_status st) {
  std::fprintf(stderr, "error (%s): %s\n", locov_last_error_code(), locov_last_error());
  return static_cast<int>(st);
}

int config_error(const std::string& message) {
  std::fprintf(stderr, "error (invalid-config): %s\n", message.c_str());
  return static_cast<int>(LOCOV_ERR_CONFIG);
}

void print_json(const OwnedString& s) {
  if (s.ptr) std::printf("%s\n", s.ptr);
}

struct CommonOpts {
  std::string config_path;
  std::string dataset;
  std::string checkpoint;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

// Loads --config (or the fallback source), applies --seed. `world_seed`
// routes --seed to the dataset-generation seed instead of the training seed.
int load_config(const CommonOpts& o, bool world_seed, bool allow_default, Config& cfg) {
  locov_status st;
  if (!o.config_path.empty()) {
    st = locov_config_load(o.config_path.c_str(), &cfg.ptr);
  } else if (!o.checkpoint.empty()) {
    st = locov_config_from_checkpoint(o.checkpoint.c_str(), &cfg.ptr);
  } else if (allow_default) {
    st = locov_config_default(&cfg.ptr);
  } else {
    return config_error("--config is required");
  }
  if (st != LOCOV_OK) return report_error(st);
  if (o.seed_set) {
    st = world_seed ? locov_config_set_world_seed(cfg.ptr, o.seed)
                    : locov_config_set_seed(cfg.ptr, o.seed);
    if (st != LOCOV_OK) return report_error(st);
  }
  return 0;
}

// --out wins; the config's output_dir is the fallback.
int resolve_out(const CommonOpts& o, const Config& cfg, bool required, std::string& out) {
  out = o.out;
  if (out.empty() && cfg.ptr) {
    OwnedString dir;
    if (locov_config_output_dir(cfg.ptr, &dir.ptr) == LOCOV_OK && dir.ptr) out = dir.ptr;
  }
  if (out.empty() && required)
    return config_error("no output directory (pass --out or set output_dir in the config)");
  return 0;
}

std::string join_commas(const std::vector<std::string>& parts) {
  std::string out;
  for (const std::string& p : parts) {
    if (!out.empty()) out += ',';
    out += p;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary detection experiments on synthetic feature worlds"};
  app.require_subcommand(1);
  app.set_version_flag("--version", locov_version());

  CommonOpts opts;
  std::string split = "test";
  std::vector<std::string> setups;

  auto add_common = [&](CLI::App* cmd, bool config, bool dataset, bool checkpoint, bool out) {
    if (config) cmd->add_option("-c,--config", opts.config_path, "experiment config (JSON)");
    if (dataset) cmd->add_option("-d,--dataset", opts.dataset, "generated dataset directory")->required();
    if (checkpoint) cmd->add_option("-k,--checkpoint", opts.checkpoint, "checkpoint file")->required();
    if (out) cmd->add_option("-o,--out", opts.out, "output directory");
    cmd->add_option("--seed", opts.seed, "seed override");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, true, false, false, true);

  CLI::App* train_lsm = app.add_subcommand("train-lsm", "first stage: caption-matching training");
  add_common(train_lsm, true, true, false, true);

  CLI::App* train_stt = app.add_subcommand("train-stt", "second stage: detector tuning on known labels");
  add_common(train_stt, true, true, true, true);

  CLI::App* evaluate = app.add_subcommand("evaluate", "score a tuned checkpoint on a dataset split");
  add_common(evaluate, true, true, true, true);
  evaluate->add_option("--split", split, "dataset split (train, val, test)");
  evaluate->add_option("--setup", setups, "class subset: novel, known, generalized, or all");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of the losses");
  add_common(gradcheck, true, false, false, true);

  CLI::App* ablate = app.add_subcommand("ablate", "region-mode x consistency x stage sweep");
  add_common(ablate, true, true, false, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(LOCOV_ERR_CONFIG);
  }
  opts.seed_set = app.get_subcommands().front()->count("--seed") > 0;

  if (app.got_subcommand(synth)) {
    Config cfg;
    if (int rc = load_config(opts, true, false, cfg)) return rc;
    std::string out;
    if (int rc = resolve_out(opts, cfg, true, out)) return rc;
    OwnedString stats;
    locov_status st = locov_synth(cfg.ptr, out.c_str(), &stats.ptr);
    if (st != LOCOV_OK) return report_error(st);
    print_json(stats);
    return 0;
  }

  if (app.got_subcommand(train_lsm)) {
    Config cfg;
    if (int rc = load_config(opts, false, false, cfg)) return rc;
    std::string out;
    if (int rc = resolve_out(opts, cfg, true, out)) return rc;
    OwnedString summary;
    locov_status st = locov_train_lsm(cfg.ptr, opts.dataset.c_str(), out.c_str(), &summary.ptr);
    if (st != LOCOV_OK) return report_error(st);
    print_json(summary);
    return 0;
  }

  if (app.got_subcommand(train_stt)) {
    Config cfg;
    if (int rc = load_config(opts, false, true, cfg)) return rc;
    std::string out;
    if (int rc = resolve_out(opts, cfg, true, out)) return rc;
    OwnedString summary;
    locov_status st = locov_train_stt(cfg.ptr, opts.dataset.c_str(), opts.checkpoint.c_str(),
                                      out.c_str(), &summary.ptr);
    if (st != LOCOV_OK) return report_error(st);
    print_json(summary);
    return 0;
  }

  if (app.got_subcommand(evaluate)) {
    Config cfg;
    if (int rc = load_config(opts, false, true, cfg)) return rc;
    std::string out;
    if (int rc = resolve_out(opts, cfg, false, out)) return rc;
    std::string joined = join_commas(setups);
    OwnedString report;
    locov_status st =
        locov_evaluate(cfg.ptr, opts.checkpoint.c_str(), opts.dataset.c_str(), split.c_str(),
                       joined.empty() ? nullptr : joined.c_str(),
                       out.empty() ? nullptr : out.c_str(), &report.ptr);
    if (st != LOCOV_OK) return report_error(st);
    print_json(report);
    return 0;
  }

  if (app.got_subcommand(gradcheck)) {
    Config cfg;
    if (int rc = load_config(opts, false, true, cfg)) return rc;
    std::string out;
    if (int rc = resolve_out(opts, cfg, false, out)) return rc;
    int pass = 0;
    OwnedString report;
    locov_status st = locov_gradcheck(cfg.ptr, out.empty() ? nullptr : out.c_str(), &pass,
                                      &report.ptr);
    if (st != LOCOV_OK) return report_error(st);
    print_json(report);
    if (!pass) {
      std::fprintf(stderr, "gradient check failed\n");
      return static_cast<int>(LOCOV_ERR_RUNTIME);
    }
    return 0;
  }

  if (app.got_subcommand(ablate)) {
    Config cfg;
    if (int rc = load_config(opts, false, false, cfg)) return rc;
    std::string out;
    if (int rc = resolve_out(opts, cfg, false, out)) return rc;
    OwnedString rows;
    locov_status st = locov_ablate(cfg.ptr, opts.dataset.c_str(),
                                   out.empty() ? nullptr : out.c_str(), &rows.ptr);
    if (st != LOCOV_OK) return report_error(st);
    print_json(rows);
    return 0;
  }

  return config_error("unknown command");
}
