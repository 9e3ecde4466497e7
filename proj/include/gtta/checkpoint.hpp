#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "gtta/tensor.hpp"

namespace gtta {

using TensorMap = std::map<std::string, Tensor>;

inline constexpr int kCheckpointVersion = 1;

// {"format_version": 1, "tensors": {name: {"shape": [...], "values": [...]}}}
// Reals use the shortest decimal form that round-trips.
std::string checkpoint_to_json(const TensorMap& tensors);
TensorMap checkpoint_from_json(std::string_view text);

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::filesystem::path& path);

// Order-stable FNV-1a digest over names, shapes and value bits.
std::uint64_t checkpoint_digest(const TensorMap& tensors);

}  // namespace gtta
