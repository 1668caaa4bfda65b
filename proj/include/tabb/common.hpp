#pragma once

// Shared plumbing: deterministic RNG with named streams, CRC32,
// little-endian encode/decode helpers, and error types.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

namespace tabb {

// Configuration errors (bad keys, bad values, schema violations). The CLI
// maps these to exit code 2; everything else derived from std::exception
// maps to exit code 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic RNG. mt19937_64 supplies the bits; the floating-point and
// integer conversions are done by hand so every draw is reproducible
// independent of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // Derive the seed for a named stream from a root seed. Streams with
  // distinct names are statistically independent.
  static uint64_t stream_seed(uint64_t root, std::string_view name) {
    return splitmix64(root ^ fnv1a64(name));
  }
  static Rng stream(uint64_t root, std::string_view name) {
    return Rng(stream_seed(root, name));
  }

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling, unbiased.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (no cached second draw, so the stream
  // position is a pure function of the call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// CRC32 (IEEE 802.3 polynomial, the same variant zlib computes)

namespace detail {
inline const std::array<uint32_t, 256>& crc32_table() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}
}  // namespace detail

inline uint32_t crc32_update(uint32_t crc, const void* data, size_t len) {
  const auto& table = detail::crc32_table();
  const auto* p = static_cast<const unsigned char*>(data);
  crc ^= 0xffffffffu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

inline uint32_t crc32(const void* data, size_t len) { return crc32_update(0, data, len); }

// ---------------------------------------------------------------------------
// Little-endian packing into byte buffers

inline void put_u32_le(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_f64_le(std::string& out, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline void put_u32_le(std::vector<uint8_t>& out, uint32_t v) {
  uint8_t b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

inline void put_f64_le(std::vector<uint8_t>& out, double v) {
  uint8_t b[8];
  std::memcpy(b, &v, 8);
  out.insert(out.end(), b, b + 8);
}

inline uint32_t get_u32_le(const char* p) {
  uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

inline double get_f64_le(const char* p) {
  double v;
  std::memcpy(&v, p, 8);
  return v;
}

inline uint32_t get_u32_le(const uint8_t* p) {
  return get_u32_le(reinterpret_cast<const char*>(p));
}

inline double get_f64_le(const uint8_t* p) {
  return get_f64_le(reinterpret_cast<const char*>(p));
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace tabb
