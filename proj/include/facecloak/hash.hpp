#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace facecloak {

inline constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ull;

// 64-bit FNV-1a, chainable through `state`.
constexpr std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                                std::uint64_t state = kFnvOffset) noexcept {
  for (unsigned char b : bytes) {
    state ^= b;
    state *= 0x100000001B3ull;
  }
  return state;
}

inline std::uint64_t fnv1a64(std::string_view text,
                             std::uint64_t state = kFnvOffset) noexcept {
  return fnv1a64(std::span<const unsigned char>(
                     reinterpret_cast<const unsigned char*>(text.data()),
                     text.size()),
                 state);
}

}  // namespace facecloak
