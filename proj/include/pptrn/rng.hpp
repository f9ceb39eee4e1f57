#pragma once

#include <array>
#include <cstdint>

namespace pptrn {

// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
// Key = 64-bit seed split into two words; counter = (block index, stream id),
// each 64 bits, little word first. Every stream is reproducible from
// (seed, stream) alone, independent of how other streams were consumed.
//
// Derived quantities:
//   uniform()  = ((u0 >> 5) * 2^26 + (u1 >> 6)) / 2^53 from two consecutive words
//   normal()   = Box-Muller on (1 - uniform(), uniform()); cos branch first,
//                sin branch cached for the next call.
class Philox {
 public:
  using Block = std::array<std::uint32_t, 4>;

  // Everything needed to resume a generator mid-stream.
  struct State {
    std::uint64_t seed = 0, stream = 0, block_index = 0;
    Block buffer{};
    std::uint32_t buffered = 0;
    bool has_spare = false;
    double spare = 0.0;
  };

  explicit Philox(std::uint64_t seed, std::uint64_t stream = 0);

  static Block encrypt(Block counter, std::array<std::uint32_t, 2> key);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  double uniform();
  double normal();
  // Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t blocks_consumed() const { return block_index_; }

  State state() const;
  static Philox from_state(const State& state);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_index_ = 0;
  Block buffer_{};
  int buffered_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// SplitMix64 finaliser over (seed, salt); used to derive per-item seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace pptrn
