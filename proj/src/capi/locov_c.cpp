#include "locov.h"

#include <cstdlib>
#include <cstring>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core/checkpoint.hpp"
#include "core/config.hpp"
#include "core/error.hpp"
#include "core/pipeline.hpp"

struct locov_config {
  locov::ExperimentConfig cfg;
};

namespace {

using nlohmann::ordered_json;

thread_local std::string g_error_code;
thread_local std::string g_error_message;

locov_status set_error(std::string code, std::string message) {
  locov_status st = code == "invalid-config" ? LOCOV_ERR_CONFIG : LOCOV_ERR_RUNTIME;
  g_error_code = std::move(code);
  g_error_message = std::move(message);
  return st;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

locov_status give(char** slot, const std::string& text) {
  if (!slot) return LOCOV_OK;
  *slot = dup_string(text);
  return *slot ? LOCOV_OK : set_error("runtime", "out of memory");
}

template <typename Fn>
locov_status guarded(Fn&& fn) {
  g_error_code.clear();
  g_error_message.clear();
  try {
    return fn();
  } catch (const locov::Error& e) {
    return set_error(e.code(), e.what());
  } catch (const std::exception& e) {
    return set_error("runtime", e.what());
  }
}

void require(const void* p, const char* what) {
  if (!p) locov::fail("invalid-argument", std::string(what) + " must not be null");
}

std::string or_empty(const char* s) { return s ? std::string(s) : std::string(); }

std::vector<std::string> split_commas(const char* s) {
  std::vector<std::string> out;
  if (!s) return out;
  std::string cur;
  for (const char* p = s;; ++p) {
    if (*p == ',' || *p == '\0') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
      if (*p == '\0') break;
    } else {
      cur += *p;
    }
  }
  return out;
}

std::optional<locov::ExperimentConfig> optional_config(const locov_config* cfg) {
  if (!cfg) return std::nullopt;
  return cfg->cfg;
}

}  // namespace

extern "C" {

const char* locov_version(void) { return "0.1.0"; }

const char* locov_last_error(void) { return g_error_message.c_str(); }

const char* locov_last_error_code(void) { return g_error_code.c_str(); }

void locov_string_free(char* s) { std::free(s); }

locov_status locov_config_default(locov_config** out) {
  return guarded([&]() -> locov_status {
    require(out, "out");
    *out = new locov_config{};
    return LOCOV_OK;
  });
}

locov_status locov_config_load(const char* path, locov_config** out) {
  return guarded([&]() -> locov_status {
    require(path, "path");
    require(out, "out");
    *out = new locov_config{locov::ExperimentConfig::load_file(path)};
    return LOCOV_OK;
  });
}

locov_status locov_config_parse(const char* json_text, locov_config** out) {
  return guarded([&]() -> locov_status {
    require(json_text, "json_text");
    require(out, "out");
    ordered_json j;
    try {
      j = ordered_json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
      locov::fail("invalid-config", std::string("config is not valid JSON: ") + e.what());
    }
    *out = new locov_config{locov::ExperimentConfig::from_json(j)};
    return LOCOV_OK;
  });
}

locov_status locov_config_from_checkpoint(const char* checkpoint_path, locov_config** out) {
  return guarded([&]() -> locov_status {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    locov::ckpt::Checkpoint ck = locov::ckpt::load_checkpoint(checkpoint_path);
    *out = new locov_config{locov::ExperimentConfig::from_json(ck.config)};
    return LOCOV_OK;
  });
}

locov_status locov_config_dump(const locov_config* cfg, char** json_out) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    require(json_out, "json_out");
    return give(json_out, cfg->cfg.to_json().dump(2));
  });
}

locov_status locov_config_output_dir(const locov_config* cfg, char** dir_out) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    require(dir_out, "dir_out");
    return give(dir_out, cfg->cfg.output_dir);
  });
}

locov_status locov_config_set_seed(locov_config* cfg, uint64_t seed) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    cfg->cfg.seed = seed;
    return LOCOV_OK;
  });
}

locov_status locov_config_set_world_seed(locov_config* cfg, uint64_t seed) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    cfg->cfg.world.seed = seed;
    return LOCOV_OK;
  });
}

void locov_config_free(locov_config* cfg) { delete cfg; }

locov_status locov_synth(const locov_config* cfg, const char* out_dir, char** stats_json) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    require(out_dir, "out_dir");
    ordered_json stats = locov::pipeline::cmd_synth(cfg->cfg, out_dir);
    return give(stats_json, stats.dump(2));
  });
}

locov_status locov_train_lsm(const locov_config* cfg, const char* dataset_dir,
                             const char* out_dir, char** summary_json) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    require(dataset_dir, "dataset_dir");
    require(out_dir, "out_dir");
    ordered_json summary = locov::pipeline::cmd_train_lsm(cfg->cfg, dataset_dir, out_dir);
    return give(summary_json, summary.dump(2));
  });
}

locov_status locov_train_stt(const locov_config* cfg, const char* dataset_dir,
                             const char* checkpoint_path, const char* out_dir,
                             char** summary_json) {
  return guarded([&]() -> locov_status {
    require(dataset_dir, "dataset_dir");
    require(checkpoint_path, "checkpoint_path");
    require(out_dir, "out_dir");
    ordered_json summary = locov::pipeline::cmd_train_stt(optional_config(cfg), dataset_dir,
                                                          checkpoint_path, out_dir);
    return give(summary_json, summary.dump(2));
  });
}

locov_status locov_evaluate(const locov_config* cfg, const char* checkpoint_path,
                            const char* dataset_dir, const char* split, const char* setups,
                            const char* out_dir, char** report_json) {
  return guarded([&]() -> locov_status {
    require(checkpoint_path, "checkpoint_path");
    require(dataset_dir, "dataset_dir");
    locov::eval::EvalReport report = locov::pipeline::cmd_evaluate(
        optional_config(cfg), checkpoint_path, dataset_dir, split ? split : "test",
        split_commas(setups), or_empty(out_dir));
    return give(report_json, report.to_json());
  });
}

locov_status locov_gradcheck(const locov_config* cfg, const char* out_dir, int* pass,
                             char** report_json) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    locov::gradcheck::Report report = locov::pipeline::cmd_gradcheck(cfg->cfg, or_empty(out_dir));
    if (pass) *pass = report.pass ? 1 : 0;
    return give(report_json, report.to_json().dump(2));
  });
}

locov_status locov_ablate(const locov_config* cfg, const char* dataset_dir, const char* out_dir,
                          char** rows_json) {
  return guarded([&]() -> locov_status {
    require(cfg, "cfg");
    require(dataset_dir, "dataset_dir");
    ordered_json rows = locov::pipeline::cmd_ablate(cfg->cfg, dataset_dir, or_empty(out_dir));
    return give(rows_json, rows.dump(2));
  });
}

locov_status locov_checkpoint_info(const char* path, char** info_json) {
  return guarded([&]() -> locov_status {
    require(path, "path");
    locov::ckpt::Checkpoint ck = locov::ckpt::load_checkpoint(path);
    ordered_json j;
    j["format_version"] = ck.format_version;
    j["stage"] = ck.stage;
    j["step"] = ck.step;
    ordered_json tensors = ordered_json::array();
    for (const auto& [name, t] : ck.tensors) {
      ordered_json entry;
      entry["name"] = name;
      entry["rows"] = t.rows();
      entry["cols"] = t.cols();
      tensors.push_back(std::move(entry));
    }
    j["tensors"] = std::move(tensors);
    j["config"] = ck.config;
    return give(info_json, j.dump(2));
  });
}

}  // extern "C"
