#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace pptrn {

// 64-bit FNV-1a. Incremental: feed bytes in order, read value().
class Fnv1a64 {
 public:
  void update(std::span<const std::uint8_t> bytes);
  void update(std::string_view text);
  void update_u64(std::uint64_t v);
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

std::string hex64(std::uint64_t v);

}  // namespace pptrn
