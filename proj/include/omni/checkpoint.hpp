#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "omni/tensor.hpp"

namespace omni {

// Checkpoint file layout (all integers little-endian):
//
//   offset  size        field
//   0       8           magic "OMNICKPT"
//   8       4           u32 format version (currently 1)
//   12      4           u32 entry count
//   then per entry:
//           4           u32 name length in bytes
//           name_len    utf-8 name
//           4           u32 ndim
//           4 * ndim    u32 dimension sizes
//           8 * numel   f64 payload, row-major, little-endian
//
// Entries are written in list order and read back preserving it.

constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& entries);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

std::map<std::string, Tensor> load_checkpoint_map(const std::string& path);

} // namespace omni
