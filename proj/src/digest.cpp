#include "maple/digest.hpp"

#include <openssl/evp.h>

#include "maple/errors.hpp"

namespace maple {

std::array<unsigned char, 32> sha256_bytes(std::string_view data) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(),
                 nullptr) != 1 ||
      len != out.size()) {
    throw Error("sha256 digest failed");
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  static const char* hex = "0123456789abcdef";
  auto raw = sha256_bytes(data);
  std::string s;
  s.reserve(64);
  for (unsigned char b : raw) {
    s.push_back(hex[b >> 4]);
    s.push_back(hex[b & 0xf]);
  }
  return s;
}

std::uint64_t sha256_seed(std::string_view data) {
  auto raw = sha256_bytes(data);
  std::uint64_t seed = 0;
  for (int i = 7; i >= 0; --i) seed = (seed << 8) | raw[static_cast<size_t>(i)];
  return seed;
}

}  // namespace maple
