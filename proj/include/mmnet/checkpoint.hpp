#pragma once

// Plain-text parameter checkpoints.
//
//   mmnet-checkpoint 1
//   entries <count>
//   <name> <rank> <d0> ... <d{rank-1}>
//   <v0> <v1> ... <v{n-1}>
//   ... one header line and one value line per entry ...
//
// Names contain no whitespace. Values are written with 17 significant digits
// so that reading a checkpoint restores every double bit-exactly. Entries are
// written in the order given, which for networks is construction order.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmnet/optim.hpp"

namespace mmnet {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterList& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint values into same-named tensors. Every tensor in `params`
// must be present with an identical shape.
void restore_checkpoint(const std::vector<CheckpointEntry>& entries, const ParameterList& params);

}  // namespace mmnet
