#pragma once

// Checkpoint file: one line of JSON (the model header plus "format" and
// "num_params"), a '\n', then num_params little-endian float64 values.
// See docs/checkpoint_format.md.

#include <memory>
#include <string>

#include "json.hpp"
#include "rsd/common.hpp"
#include "rsd/nn.hpp"

namespace rsd {

inline constexpr const char* kCheckpointFormat = "rsd-checkpoint-1";

struct RawCheckpoint {
  nlohmann::json header;
  Vector params;
};

void write_checkpoint(const std::string& path, const nlohmann::json& header, const Vector& params);
RawCheckpoint read_checkpoint(const std::string& path);

void save_denoiser(const std::string& path, const Denoiser& model);
std::unique_ptr<Denoiser> load_denoiser(const std::string& path);

}  // namespace rsd
