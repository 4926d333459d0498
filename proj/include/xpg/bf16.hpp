// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>

namespace xpg::bf16 {

// 1 sign bit, 8 exponent bits, 7 mantissa bits; stored as little-endian u16.

inline constexpr float to_float(uint16_t bits) {
    return std::bit_cast<float>(static_cast<uint32_t>(bits) << 16);
}

// Round-to-nearest-even. NaN payloads are kept quiet and non-zero.
inline constexpr uint16_t from_float(float value) {
    uint32_t u = std::bit_cast<uint32_t>(value);
    if ((u & 0x7f800000u) == 0x7f800000u && (u & 0x007fffffu) != 0) {
        return static_cast<uint16_t>((u >> 16) | 0x0040u);
    }
    uint32_t rounding = 0x7fffu + ((u >> 16) & 1u);
    return static_cast<uint16_t>((u + rounding) >> 16);
}

inline constexpr uint8_t exponent(uint16_t bits) { return static_cast<uint8_t>((bits >> 7) & 0xffu); }

// Sign bit in bit 7, mantissa in bits 0..6.
inline constexpr uint8_t sign_mantissa(uint16_t bits) {
    return static_cast<uint8_t>(((bits >> 8) & 0x80u) | (bits & 0x7fu));
}

inline constexpr uint16_t assemble(uint8_t exp, uint8_t sm) {
    return static_cast<uint16_t>((static_cast<uint16_t>(sm & 0x80u) << 8) |
                                 (static_cast<uint16_t>(exp) << 7) | (sm & 0x7fu));
}

inline uint16_t load(std::span<const std::byte> bytes, size_t index) {
    return static_cast<uint16_t>(std::to_integer<uint16_t>(bytes[2 * index]) |
                                 (std::to_integer<uint16_t>(bytes[2 * index + 1]) << 8));
}

inline void store(std::span<std::byte> bytes, size_t index, uint16_t value) {
    bytes[2 * index] = static_cast<std::byte>(value & 0xffu);
    bytes[2 * index + 1] = static_cast<std::byte>(value >> 8);
}

}  // namespace xpg::bf16
