#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedstar {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t tag_hash(std::string_view tag) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

constexpr std::uint64_t seed_component(std::uint64_t v) noexcept { return v; }
constexpr std::uint64_t seed_component(std::string_view tag) noexcept {
  return detail::tag_hash(tag);
}

/// Hierarchical seed derivation: child streams are a pure function of the
/// parent seed and the path of components, so adding a component never
/// perturbs siblings.
template <typename... Components>
constexpr std::uint64_t derive_seed(std::uint64_t parent, Components... components) noexcept {
  std::uint64_t h = parent;
  ((h = detail::splitmix64(h ^ detail::splitmix64(seed_component(components)))), ...);
  return h;
}

}  // namespace fedstar
