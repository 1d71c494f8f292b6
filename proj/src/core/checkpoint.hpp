#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core/tensor.hpp"

namespace locov::ckpt {

// Training snapshot: every named tensor (parameters plus optimizer state)
// with the config that produced it. Values are stored on disk as
// little-endian 32-bit floats behind a JSON header, so save -> load -> save
// reproduces the file byte for byte.
struct Checkpoint {
  int format_version = 1;
  std::string stage;  // "lsm" or "stt"
  std::size_t step = 0;
  nlohmann::ordered_json config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace locov::ckpt
