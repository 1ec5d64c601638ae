#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sharpopt/param_vector.hpp"

namespace sharpopt {

/// Counter-based generator: draw k of (seed, stream) is a pure function of
/// (seed, stream, k), so streams reproduce bit-for-bit on every platform.
/// Gaussians use Box-Muller on top of the uniform stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent generator for a named sub-purpose (init, shuffle, probe, ...).
  Rng fork(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Unbiased integer in [0, bound); bound > 0.
  std::uint64_t below(std::uint64_t bound);
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
};

/// i.i.d. N(0, sigma^2) coordinates in the given layout. Throws ParameterError if sigma <= 0.
ParamVector gaussian_vector(Rng& rng, const LayoutPtr& layout, double sigma);

}  // namespace sharpopt
