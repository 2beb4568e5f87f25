// Parameter checkpoints: a flat little-endian float32 blob plus a JSON
// manifest listing (tensor name, shape, byte offset) for each entry.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "petfuse/tensor.hpp"

namespace petfuse {

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  int64_t byte_offset = 0;
};

// Writes `<path>.bin` and `<path>.json`.
void save_checkpoint(const std::string& path_base,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

// Loads all tensors from `<path>.bin` / `<path>.json`.
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path_base);

}  // namespace petfuse
