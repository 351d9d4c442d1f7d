#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

#include "subzero/matrix.hpp"

namespace subzero {

/// Philox4x32-10 block: maps (counter, key) to four independent 32-bit words.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key) noexcept;

/// Stateless 64-bit mixing of a seed with a list of tags. Used for per-step
/// seeds, per-replica seeds and subspace seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept;

/// Reproducible standard-normal stream. Value k is a pure function of
/// (seed, k): block k/2 of Philox yields two uniforms, Box-Muller turns them
/// into a (cos, sin) pair, and k's parity picks one. Batching, skipping and
/// replay therefore never change the sequence.
///
/// Single consumer; do not share one stream across threads.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) noexcept : seed_(seed) {}

  double next() noexcept;
  /// Repositions to the start of the sequence.
  void reset() noexcept { counter_ = 0; }
  void reset(std::uint64_t seed) noexcept {
    seed_ = seed;
    counter_ = 0;
  }
  void discard(std::uint64_t n) noexcept { counter_ += n; }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return counter_; }

  /// k-th value of the stream with this seed, without touching any state.
  static double at(std::uint64_t seed, std::uint64_t k) noexcept;
  /// k-th uniform in (0, 1) of the underlying generator.
  static double uniform_at(std::uint64_t seed, std::uint64_t k) noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::uint64_t cached_block_ = ~std::uint64_t{0};
  double cached_[2] = {0.0, 0.0};
};

/// rows x cols i.i.d. N(0,1), filled row-major; consumes rows*cols values.
Matrix gaussian_matrix(GaussianStream& stream, std::size_t rows, std::size_t cols);

}  // namespace subzero
