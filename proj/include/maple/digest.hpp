#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace maple {

std::array<unsigned char, 32> sha256_bytes(std::string_view data);

// Lowercase hex digest; used for cache keys, config digests and hierarchy
// fingerprints.
std::string sha256_hex(std::string_view data);

// First eight digest bytes, little-endian, as a PRNG seed.
std::uint64_t sha256_seed(std::string_view data);

}  // namespace maple
