#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>

#include "neuronfuse/errors.hpp"

namespace nfuse {

// Storage dtypes. F32/F16/BF16 hold weights; U8 exists only for the 0/1
// survivor masks stored next to delta tensors.
enum class DType : uint8_t { F32, F16, BF16, U8 };

inline size_t dtype_width(DType d) {
    switch (d) {
        case DType::F32:  return 4;
        case DType::F16:  return 2;
        case DType::BF16: return 2;
        case DType::U8:   return 1;
    }
    return 0;
}

inline const char* dtype_name(DType d) {
    switch (d) {
        case DType::F32:  return "F32";
        case DType::F16:  return "F16";
        case DType::BF16: return "BF16";
        case DType::U8:   return "U8";
    }
    return "?";
}

inline DType parse_dtype(const std::string& tag) {
    if (tag == "F32")  return DType::F32;
    if (tag == "F16")  return DType::F16;
    if (tag == "BF16") return DType::BF16;
    if (tag == "U8")   return DType::U8;
    throw ValidationError("unsupported dtype tag '" + tag + "'");
}

// 16-bit floats widen to f32 exactly; narrowing rounds to nearest, ties to even.

inline float f16_to_f32(uint16_t h) {
    uint32_t sign = uint32_t(h & 0x8000u) << 16;
    uint32_t exp  = (h >> 10) & 0x1Fu;
    uint32_t man  = h & 0x3FFu;
    uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign;
        } else {
            // subnormal: shift the significand up until the hidden bit appears
            int e = 0;
            uint32_t m = man;
            while (!(m & 0x400u)) { m <<= 1; ++e; }
            bits = sign | (uint32_t(112 - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (man << 13);
    } else {
        bits = sign | ((exp + 112) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

inline uint16_t f32_to_f16(float v) {
    uint32_t bits = std::bit_cast<uint32_t>(v);
    uint16_t sign = uint16_t((bits >> 16) & 0x8000u);
    uint32_t exp  = (bits >> 23) & 0xFFu;
    uint32_t man  = bits & 0x7FFFFFu;

    if (exp == 0xFF) // inf or nan
        return uint16_t(sign | 0x7C00u | (man ? 0x0200u : 0u));
    if (exp == 0) // f32 subnormals are far below the f16 range
        return sign;

    int e16 = int(exp) - 127 + 15;
    if (e16 >= 31) // overflow rounds to inf
        return uint16_t(sign | 0x7C00u);

    uint32_t sig = man | 0x800000u; // 24-bit significand with hidden bit
    uint32_t h;
    if (e16 >= 1) {
        h = (uint32_t(e16) << 10) | (man >> 13);
        uint32_t rem = sig & 0x1FFFu;
        // round to nearest even; the carry may walk into the exponent, which
        // is exactly the right behavior (up to and including 0x7C00 = inf)
        if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
    } else {
        int shift = 14 - e16; // bits discarded when landing in the subnormal range
        if (shift > 24)
            return sign; // too small for even the halfway case
        h = sig >> shift;
        uint32_t rem  = sig & ((1u << shift) - 1u);
        uint32_t half = 1u << (shift - 1);
        if (rem > half || (rem == half && (h & 1u))) ++h;
    }
    return uint16_t(sign | h);
}

inline float bf16_to_f32(uint16_t h) {
    return std::bit_cast<float>(uint32_t(h) << 16);
}

inline uint16_t f32_to_bf16(float v) {
    uint32_t bits = std::bit_cast<uint32_t>(v);
    if ((bits & 0x7F800000u) == 0x7F800000u && (bits & 0x7FFFFFu))
        return uint16_t((bits >> 16) | 0x0040u); // quiet nan
    uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb; // round to nearest even via bias; carries are correct
    return uint16_t(bits >> 16);
}

// Bulk conversion between raw little-endian storage bytes and f32 values.

inline void decode_values(std::span<const uint8_t> bytes, DType d, std::span<float> out) {
    size_t w = dtype_width(d);
    if (bytes.size() != out.size() * w)
        throw ValidationError("decode size mismatch: " + std::to_string(bytes.size()) +
                              " bytes for " + std::to_string(out.size()) + " values");
    switch (d) {
        case DType::F32:
            for (size_t i = 0; i < out.size(); ++i) {
                uint32_t u = uint32_t(bytes[4 * i]) | uint32_t(bytes[4 * i + 1]) << 8 |
                             uint32_t(bytes[4 * i + 2]) << 16 | uint32_t(bytes[4 * i + 3]) << 24;
                out[i] = std::bit_cast<float>(u);
            }
            break;
        case DType::F16:
            for (size_t i = 0; i < out.size(); ++i)
                out[i] = f16_to_f32(uint16_t(bytes[2 * i] | uint16_t(bytes[2 * i + 1]) << 8));
            break;
        case DType::BF16:
            for (size_t i = 0; i < out.size(); ++i)
                out[i] = bf16_to_f32(uint16_t(bytes[2 * i] | uint16_t(bytes[2 * i + 1]) << 8));
            break;
        case DType::U8:
            throw ValidationError("U8 tensors hold masks, not weights; use the mask reader");
    }
}

inline void encode_values(std::span<const float> values, DType d, std::span<uint8_t> out) {
    size_t w = dtype_width(d);
    if (out.size() != values.size() * w)
        throw ValidationError("encode size mismatch");
    switch (d) {
        case DType::F32:
            for (size_t i = 0; i < values.size(); ++i) {
                uint32_t u = std::bit_cast<uint32_t>(values[i]);
                out[4 * i]     = uint8_t(u);
                out[4 * i + 1] = uint8_t(u >> 8);
                out[4 * i + 2] = uint8_t(u >> 16);
                out[4 * i + 3] = uint8_t(u >> 24);
            }
            break;
        case DType::F16:
            for (size_t i = 0; i < values.size(); ++i) {
                uint16_t u = f32_to_f16(values[i]);
                out[2 * i]     = uint8_t(u);
                out[2 * i + 1] = uint8_t(u >> 8);
            }
            break;
        case DType::BF16:
            for (size_t i = 0; i < values.size(); ++i) {
                uint16_t u = f32_to_bf16(values[i]);
                out[2 * i]     = uint8_t(u);
                out[2 * i + 1] = uint8_t(u >> 8);
            }
            break;
        case DType::U8:
            throw ValidationError("U8 tensors hold masks, not weights");
    }
}

} // namespace nfuse
