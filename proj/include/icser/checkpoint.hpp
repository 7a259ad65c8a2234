#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icser/nn.hpp"
#include "icser/tensor.hpp"

#include "json.hpp"

namespace icser {

/// Named buffer as stored in a checkpoint.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// Single-file checkpoint: JSON manifest (config echo, entry names, shapes,
/// byte offsets) followed by raw little-endian 64-bit floats in manifest
/// order. Save -> load -> save is byte-identical.
struct Checkpoint {
  std::string stage;
  std::int64_t step = 0;
  std::string rng_state;       // serialized mt19937_64 stream
  nlohmann::json config_echo;  // opaque; written back verbatim
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;

  /// Entries named from the registry in registry order.
  static Checkpoint from_params(const ParamRegistry& params);
  /// Copies values into matching registry parameters; every registry
  /// parameter must be present with the right shape.
  void load_into(ParamRegistry& params) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace icser
