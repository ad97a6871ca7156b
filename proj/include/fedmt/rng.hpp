#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedmt {

using Rng = std::mt19937_64;

// Named sub-streams of a single root seed. Two calls with the same
// (root, name, indices) produce identical generators; changing any component
// gives an unrelated stream.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                          std::initializer_list<std::uint64_t> indices = {});

inline Rng make_rng(std::uint64_t root, std::string_view name,
                    std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(derive_seed(root, name, indices));
}

}  // namespace fedmt
