#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "pblab/model.hpp"

namespace pblab {

// Binary container: "PBLB" magic, format version, a structured-text header
// (config snapshot, seed manifest, step count), a manifest of named
// little-endian float32 arrays with byte offsets, then the raw blob.
// Round-trips are bit-exact.
struct Checkpoint {
  nlohmann::ordered_json meta;
  ParamStore<float> tensors;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t checkpoint_file_hash(const std::filesystem::path& path);

}  // namespace pblab
