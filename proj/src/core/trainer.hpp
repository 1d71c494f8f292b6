#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/checkpoint.hpp"
#include "core/config.hpp"
#include "core/detector.hpp"
#include "core/model.hpp"
#include "core/synthworld.hpp"

namespace locov::train {

// SGD with momentum: v <- mu v + g, w <- w - lr v. Velocity buffers appear
// on first use, keyed by parameter name, and travel with checkpoints.
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}

  void step(const std::vector<emb::Parameter*>& params, double lr);

  std::map<std::string, Tensor>& velocity() { return velocity_; }
  const std::map<std::string, Tensor>& velocity() const { return velocity_; }
  double momentum() const { return momentum_; }

 private:
  double momentum_;
  std::map<std::string, Tensor> velocity_;
};

// Parameters plus optimizer velocity (under "opt/velocity/<name>") in one
// snapshot; restore verifies names and shapes against the live model.
ckpt::Checkpoint snapshot(const std::string& stage, std::size_t step, const ExperimentConfig& cfg,
                          Model& model, const Sgd* opt);
void restore(const ckpt::Checkpoint& ck, Model& model, Sgd* opt);

// Region selection as configured: thresholded, capped proposals / grid cells.
regions::RegionSet box_regions_for(const synth::SynthImage& img, const ExperimentConfig& cfg);
regions::RegionSet grid_regions_for(const synth::SynthImage& img, const ExperimentConfig& cfg);

// Labels every selected proposal against the image's annotations: class id
// at IoU >= stt.label_iou, else `background_label`.
det::LabeledRegions label_regions(const synth::SynthImage& img, const ExperimentConfig& cfg,
                                  std::size_t background_label);

using MetricsSink = std::function<void(const nlohmann::ordered_json&)>;
using CheckpointSink = std::function<void(std::size_t step, Model& model, Sgd& opt)>;

// First training stage: the four matching losses over image-caption batches.
// Emits one record per step with keys {step, lr, loss_grounding, loss_icm,
// loss_mlm, loss_consistency, loss_total}; disabled components log exactly 0.
// `periodic` (optional) fires every lsm.checkpoint_every steps.
void train_lsm(Model& model, const synth::World& world, const ExperimentConfig& cfg, Sgd& opt,
               const MetricsSink& metrics, const CheckpointSink& periodic = nullptr);

// Second stage: background-aware cross-entropy on labeled proposals with the
// configured freeze, early-stopped on validation generalized AP. Records
// carry {step, lr, loss_stt, val_generalized_ap}; the validation field is
// null on steps without an evaluation. The model ends at the best-scoring
// parameters when early stopping is active.
struct SttResult {
  std::size_t steps_run = 0;
  std::size_t best_step = 0;
  double best_val_ap = -1.0;  // -1 when no validation pass ran
};
SttResult train_stt(Model& model, const synth::World& world, const ExperimentConfig& cfg, Sgd& opt,
                    const MetricsSink& metrics);

}  // namespace locov::train
