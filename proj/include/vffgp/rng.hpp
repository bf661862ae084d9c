#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vffgp {

// All randomness flows from one user-facing seed.  Each component pulls a
// named substream ("data", "init", "hmc", ...) so rerunning one stage never
// perturbs another.
[[nodiscard]] inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name) {
  // FNV-1a over the name, mixed with the base seed
  std::uint64_t h = 14695981039346656037ull ^ seed;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  return h;
}

[[nodiscard]] inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view name) {
  return std::mt19937_64(substream_seed(seed, name));
}

// Per-replicate generator for experiment workers.
[[nodiscard]] inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view name,
                                              std::uint64_t index) {
  return std::mt19937_64(substream_seed(substream_seed(seed, name) + 0x9e3779b97f4a7c15ull * (index + 1), "replicate"));
}

}  // namespace vffgp
