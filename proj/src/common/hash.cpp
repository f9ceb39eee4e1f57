#include "pptrn/hash.hpp"

#include <cstdio>

namespace pptrn {

void Fnv1a64::update(std::span<const std::uint8_t> bytes) {
  for (auto b : bytes) {
    state_ ^= b;
    state_ *= 0x100000001b3ull;
  }
}

void Fnv1a64::update(std::string_view text) {
  update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void Fnv1a64::update_u64(std::uint64_t v) {
  std::uint8_t bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = std::uint8_t(v >> (8 * i));
  update(bytes);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace pptrn
