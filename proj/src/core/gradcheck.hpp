#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/config.hpp"
#include "core/embeddings.hpp"

namespace locov::gradcheck {

struct Options {
  std::size_t instances = 20;  // random instances per loss family
  double tolerance = 1e-4;     // relative error bound
  double floor = 1e-7;         // absolute error below which a coordinate passes
  std::uint64_t seed = 13;
  // Test hook: parameters in this group get a deliberately wrong analytic
  // gradient, so the matching family must fail and name the group.
  std::string corrupt_group;
};

struct GroupResult {
  std::string group;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct FamilyResult {
  std::string family;
  std::size_t instances = 0;
  std::vector<GroupResult> groups;
  bool pass = true;
};

struct Report {
  double tolerance = 0.0;
  double floor = 0.0;
  std::vector<FamilyResult> families;
  bool pass = true;

  nlohmann::ordered_json to_json() const;
};

// Compares tape gradients against central finite differences over every
// trainable coordinate, at small dimensions, for each loss family the config
// enables (plus the tuning-stage cross-entropy). The consistency loss is
// checked in both gradient-flow modes; in fixed-target mode only the
// cross-attention parameters are compared, since the target path is
// deliberately cut out of the analytic gradient there.
Report run_suite(const ExperimentConfig& cfg, const Options& opt);

// FD check of an arbitrary scalar function against pre-filled param.grad
// buffers. An empty parameter list passes vacuously.
std::vector<GroupResult> check_gradients(const std::function<double()>& value,
                                         const std::vector<emb::Parameter*>& params,
                                         const Options& opt);

}  // namespace locov::gradcheck
