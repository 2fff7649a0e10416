#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace corrmatch {

/// Mixes a parent seed with a label (and optional index) into a child seed.
/// Every random stream in the project is derived this way from one base seed.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index);

/// Seeded generator with platform-independent draws. The standard library
/// distributions are implementation-defined, so uniform and normal variates
/// are built directly from the 64-bit engine output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n);
  /// Uniform direction on the unit sphere (normalized Gaussian triple).
  Eigen::Vector3d unit_vector();

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

}  // namespace corrmatch
