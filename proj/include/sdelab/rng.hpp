#pragma once

#include <array>
#include <cstdint>

namespace sdelab {

// Counter-based generator (Philox4x32-10). A stream is identified by
// (seed, stream id); draws are a pure function of (seed, stream, counter),
// so per-chain streams give identical results regardless of evaluation order.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  // Uniform on the open interval (0, 1).
  double uniform() noexcept;
  double normal() noexcept;
  // Index in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  void refill() noexcept;

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int block_pos_ = 4;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

// Derive a child stream id so nested consumers (module, chain, projection)
// never collide.
std::uint64_t derive_stream(std::uint64_t parent, std::uint64_t child) noexcept;

}  // namespace sdelab
