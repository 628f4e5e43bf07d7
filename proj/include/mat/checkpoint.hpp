#pragma once
// Parameter checkpoints: a named f64 tensor table plus per-optimizer Adam
// moment state, CRC-protected. Callers pair the binary file with a JSON
// sidecar carrying run metadata (config, iteration, best validation score);
// this module only handles the binary payload.

#include <map>
#include <string>

#include "mat/adam.hpp"
#include "mat/tensor.hpp"

namespace mat::gradcore {

struct CheckpointData {
  // Parameter and buffer values by name. Shapes round-trip exactly;
  // loaded tensors do not require gradients.
  std::map<std::string, Tensor> tensors;
  // Optimizer group name -> parameter name -> moments. Groups let one file
  // carry several optimizers (e.g. network and metric) without name clashes.
  std::map<std::string, std::map<std::string, AdamState>> adam;
};

// Writes `data` to `path` atomically enough for our purposes (truncate +
// rewrite). Throws FormatError on I/O failure.
void save_checkpoint(const std::string& path, const CheckpointData& data);

// Reads a checkpoint written by save_checkpoint. Throws FormatError on a bad
// magic or malformed field, VersionError on an unknown version,
// TruncationError when the file ends early, ChecksumError on CRC mismatch.
CheckpointData load_checkpoint(const std::string& path);

}  // namespace mat::gradcore
