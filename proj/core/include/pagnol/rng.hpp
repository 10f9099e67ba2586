#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace pagnol {

// SplitMix64 finalizer. Used to derive independent child seeds from a root
// seed so every stochastic component gets its own stream.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Child seed for a named component, e.g. derive_seed(root, "init").
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view component) noexcept {
  return mix_seed(root ^ fnv1a(component));
}

// Child seed for an indexed event, e.g. (step, sequence) pairs for dropout.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t h = mix_seed(root);
  for (std::uint64_t p : path) h = mix_seed(h ^ p);
  return h;
}

using Rng = std::mt19937_64;

}  // namespace pagnol
