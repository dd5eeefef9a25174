#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <random>
#include <stdexcept>
#include <string>

namespace mudman {

// ----------------------------------------------------------------------------
// Errors
// ----------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a configuration, architecture or argument violates a contract.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A ForwardCache was used against weights that changed since the forward.
class StaleCacheError : public Error {
 public:
  using Error::Error;
};

/// A loss or weight became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

#define MUDMAN_REQUIRE(cond, msg)                    \
  do {                                               \
    if (!(cond)) throw ::mudman::InvalidArgument(msg); \
  } while (0)

// ----------------------------------------------------------------------------
// Weight stamps
// ----------------------------------------------------------------------------

// Every mutation of a weight matrix takes a fresh stamp from a process-wide
// counter. Copies keep their stamp (same values), so a cache recorded against
// a stamp is valid exactly while the weights it read are untouched.
inline std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// ----------------------------------------------------------------------------
// Allocation accounting
// ----------------------------------------------------------------------------

namespace detail {
inline thread_local std::int64_t tracked_bytes = 0;
}  // namespace detail

/// Live bytes held by Matrix storage on the calling thread.
inline std::int64_t tracked_matrix_bytes() { return detail::tracked_bytes; }

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    detail::tracked_bytes += static_cast<std::int64_t>(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::tracked_bytes -= static_cast<std::int64_t>(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

// ----------------------------------------------------------------------------
// Portable randomness
// ----------------------------------------------------------------------------

// std::*_distribution output is implementation-defined, so all sampling goes
// through these helpers on top of mt19937_64 (whose output is standardized).

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (b + 0x632BE59BD9B4E019ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one value per call; no caching state).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

/// FNV-1a over raw bytes; used for checkpoint fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mudman
