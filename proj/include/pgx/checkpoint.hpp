#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "pgx/tensor.hpp"

namespace pgx {

// Checkpoint container: named float32 tensors, little-endian on disk.
// Layout: "PGXC", u32 version, then records of
//   u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 values
using TensorMap = std::map<std::string, TensorF>;

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::filesystem::path& path);

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace pgx
