#pragma once

#include <string>
#include <vector>

#include "egdarts/tensor.hpp"

namespace egdarts {

/// Weight checkpoint file format: one JSON manifest line (entry names, shapes,
/// element counts, in order), then '\n', then the concatenated tensor data as
/// little-endian 64-bit floats.
void save_checkpoint(const std::string& path, const std::vector<TensorPtr>& tensors,
                     const std::vector<std::string>& names);

/// Loads into existing tensors; names and shapes must match the manifest
/// exactly and in order.
void load_checkpoint(const std::string& path, const std::vector<TensorPtr>& tensors,
                     const std::vector<std::string>& names);

}  // namespace egdarts
