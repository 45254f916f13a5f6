#pragma once

// Checkpoint files: "MKUPCKPT", a little-endian u64 header length, a JSON header
// (schema version, resolution, dimensions, parameter names and shapes), then the
// raw float32 parameter values in header order.

#include "mkup/diffusion.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace mkup {

inline constexpr int kCheckpointSchemaVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const Model<Real>& model, const std::filesystem::path& path);
Model<Real> load_checkpoint(const std::filesystem::path& path);

}  // namespace mkup
