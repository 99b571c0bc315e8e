#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace msd {

using Engine = std::mt19937_64;

struct RngState {
  std::uint64_t seed = 0;
  std::string_view algorithm = "mt19937_64";
};

inline Engine make_engine(const RngState& state) { return Engine(state.seed); }

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for one named sub-stream (e.g. sample id + role). Depends only on
/// (base, key), never on call order.
inline RngState derive_seed(const RngState& base, std::string_view key) {
  return RngState{splitmix64(base.seed ^ fnv1a64(key)), base.algorithm};
}

}  // namespace msd
