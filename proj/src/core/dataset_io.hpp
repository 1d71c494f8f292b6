#pragma once

#include <string>

#include "core/synthworld.hpp"

namespace locov::synth {

// On-disk layout of a generated world:
//   manifest.json   config snapshot, class catalog, split index
//   vocab.txt       one token per line, id order
//   <split>.jsonl   one record per image: boxes, labels, caption, proposals
//   <split>.bin     named float32 tensors (proposal/grid features per image)
// Same config + seed writes byte-identical directories.
void write_dataset(const World& world, const std::string& dir);

World load_dataset(const std::string& dir);

}  // namespace locov::synth
