#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "roadforge/diff/tensor.hpp"

namespace roadforge::diff {

/// Named tensors, ordered by name.
using TensorMap = std::map<std::string, Tensor>;

/// Binary checkpoint, all integers little-endian:
///
///   magic   "RFCKPT01"                 8 bytes
///   count   u32
///   count x { name_len u32, name bytes, rank u32, dims u64[rank], offset u64 }
///   payload f64 values, each tensor row-major at `offset` bytes from the
///           start of the payload
///
/// Tensors are written in name order, so equal maps give identical bytes.
std::string encode_checkpoint(const TensorMap& tensors);
TensorMap decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::filesystem::path& path);

}  // namespace roadforge::diff
