#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/config.hpp"
#include "core/evaluation.hpp"
#include "core/gradcheck.hpp"

namespace locov::pipeline {

// Exclusive claim on an output directory while a command writes into it.
// Creates the directory if needed; refuses to start while another run holds
// the lock file. Released (file removed) on destruction.
class DirLock {
 public:
  explicit DirLock(const std::string& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

// Generates the configured world under `dir` (manifest, vocab, splits,
// tensors) and returns the dataset statistics that also land in stats.json.
nlohmann::ordered_json cmd_synth(const ExperimentConfig& cfg, const std::string& dir);

// First training stage on a generated dataset. Writes lsm_metrics.jsonl,
// periodic lsm-step<N>.ckpt files when configured, and final lsm.ckpt.
// Returns a run summary (steps, artifact paths, final loss record).
nlohmann::ordered_json cmd_train_lsm(ExperimentConfig cfg, const std::string& dataset_dir,
                                     const std::string& out_dir);

// Second training stage starting from a first-stage checkpoint. Without an
// explicit config the checkpoint's snapshot is used. Writes stt_metrics.jsonl
// and stt.ckpt.
nlohmann::ordered_json cmd_train_stt(std::optional<ExperimentConfig> cfg,
                                     const std::string& dataset_dir,
                                     const std::string& checkpoint_path,
                                     const std::string& out_dir);

// Detection metrics of a tuned checkpoint on one dataset split. `setups`
// picks the class subsets ("novel", "known", "generalized", "all"); empty
// means all three. Writes eval.json + eval.csv when out_dir is non-empty.
eval::EvalReport cmd_evaluate(std::optional<ExperimentConfig> cfg,
                              const std::string& checkpoint_path, const std::string& dataset_dir,
                              const std::string& split, const std::vector<std::string>& setups,
                              const std::string& out_dir);

// Finite-difference audit of every enabled loss at reduced dimensions.
// Writes gradcheck.json when out_dir is non-empty.
gradcheck::Report cmd_gradcheck(const ExperimentConfig& cfg, const std::string& out_dir);

// Runs the configured grid of region modes x consistency x stages on one
// dataset and scores every cell on the test split. A failing cell is recorded
// (status + error columns) without stopping the sweep. Returns the rows and
// writes ablation.csv when out_dir is non-empty.
nlohmann::ordered_json cmd_ablate(ExperimentConfig cfg, const std::string& dataset_dir,
                                  const std::string& out_dir);

}  // namespace locov::pipeline
