#pragma once

#include <filesystem>
#include <string>

#include "cast/autodiff.hpp"

namespace cast {

// Binary checkpoint, little-endian, one record per parameter in name order:
//   u32 name_length, name bytes, u32 rank, u64 dims[rank], f64 payload[prod(dims)]
// A text manifest lists "name dims..." one parameter per line.

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
/// Loads every record; trainable flags default to true.
ParamStore load_checkpoint(const std::filesystem::path& path);
void save_manifest(const ParamStore& store, const std::filesystem::path& path);
std::string manifest_text(const ParamStore& store);

}  // namespace cast
