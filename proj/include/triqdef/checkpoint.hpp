#pragma once

// Checkpoint container "TQCKPT01": magic, u32 format version, then a
// sequence of named sections (u64-length-prefixed name and payload). All
// numbers are little-endian; doubles are stored as raw 64-bit patterns, so
// load followed by save reproduces the file byte for byte.

#include <string>

#include "triqdef/training.hpp"

namespace triqdef::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

std::string encode(const training::TrainState& s);
training::TrainState decode(const std::string& bytes, const std::string& source);

void save(const std::string& path, const training::TrainState& s);
training::TrainState load(const std::string& path);

} // namespace triqdef::checkpoint
