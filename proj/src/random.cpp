#include "subzero/random.hpp"

#include <cmath>
#include <numbers>

#include "subzero/errors.hpp"

namespace subzero {
namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// 53 random bits mapped to the open interval (0, 1).
inline double to_open_unit(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

std::array<std::uint32_t, 4> block_words(std::uint64_t seed, std::uint64_t block) noexcept {
  return philox4x32({static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32), 0u, 0u},
                    {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
}

void box_muller_block(std::uint64_t seed, std::uint64_t block, double out[2]) noexcept {
  const auto w = block_words(seed, block);
  const double u1 = to_open_unit((static_cast<std::uint64_t>(w[0]) << 32) | w[1]);
  const double u2 = to_open_unit((static_cast<std::uint64_t>(w[2]) << 32) | w[3]);
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  out[0] = radius * std::cos(angle);
  out[1] = radius * std::sin(angle);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key) noexcept {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632BE59BD9B4E019ull));
  return h;
}

double GaussianStream::next() noexcept {
  const std::uint64_t block = counter_ >> 1;
  if (block != cached_block_) {
    box_muller_block(seed_, block, cached_);
    cached_block_ = block;
  }
  return cached_[counter_++ & 1u];
}

double GaussianStream::at(std::uint64_t seed, std::uint64_t k) noexcept {
  double pair[2];
  box_muller_block(seed, k >> 1, pair);
  return pair[k & 1u];
}

double GaussianStream::uniform_at(std::uint64_t seed, std::uint64_t k) noexcept {
  const auto w = block_words(seed ^ 0xA5A5A5A55A5A5A5Aull, k);
  return to_open_unit((static_cast<std::uint64_t>(w[0]) << 32) | w[1]);
}

Matrix gaussian_matrix(GaussianStream& stream, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw ShapeError("gaussian_matrix needs positive dimensions");
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stream.next();
  return m;
}

}  // namespace subzero
