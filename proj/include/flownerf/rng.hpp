#pragma once

#include <random>

#include "flownerf/common.hpp"

namespace flownerf {

// Thin wrapper so every module draws from explicitly seeded streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  long long uniform_int(long long lo, long long hi) {  // inclusive bounds
    return std::uniform_int_distribution<long long>(lo, hi)(eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace flownerf
