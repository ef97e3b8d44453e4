#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace flownerf {

// Error taxonomy. The CLI maps these to process exit codes
// (config -> 2, io -> 3, numeric -> 4).
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Counter-based seeding: every stochastic choice in the pipeline derives its
// stream from (seed, stream id, counter), so resuming from a checkpoint
// replays the exact same randomness without serializing generator state.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream,
                              std::uint64_t counter = 0) {
  return splitmix64(splitmix64(seed ^ 0x632be59bd9b4e019ULL) + splitmix64(stream) +
                    0x9e3779b97f4a7c15ULL * counter);
}

}  // namespace flownerf
