#pragma once

#include <filesystem>

#include "chunkgrad/model.hpp"

namespace chunkgrad {

// Little-endian binary: "CHGD", u32 version, model config, u32 array count,
// then per array u32 name length, name, u8 dtype (0 f32, 1 f64), u32 rank,
// u64 dims, raw data.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Params<T>& params);

// Arrays stored in the other dtype are converted on load.
template <class T>
Params<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace chunkgrad
