#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "saefd/common.hpp"

namespace saefd {

// IEEE 754 binary16 conversion with round-to-nearest-even, so stored anchor
// payloads are bit-exact across implementations.

inline std::uint16_t float_to_half(float f) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const auto exp_field = static_cast<std::int32_t>((bits >> 23) & 0xffu);
    const std::uint32_t mant = bits & 0x7fffffu;

    if (exp_field == 0xff) {  // inf / nan
        const std::uint16_t payload =
            mant ? static_cast<std::uint16_t>(0x200u | (mant >> 13)) : std::uint16_t(0);
        return static_cast<std::uint16_t>(sign | 0x7c00u | payload);
    }
    if (exp_field == 0) return sign;  // float zero / subnormal: below half resolution

    const std::uint32_t sig = mant | 0x800000u;       // 24-bit significand
    const std::int32_t e2 = exp_field - 127;          // value = sig * 2^(e2 - 23)
    if (e2 > 15) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (e2 < -25) return sign;
    if (e2 == -25) return static_cast<std::uint16_t>(sign | (mant ? 1u : 0u));  // tie at 2^-25 -> 0

    const int drop = 13 + (e2 < -14 ? -14 - e2 : 0);  // bits to round away, <= 24
    std::uint32_t keep = sig >> drop;
    const std::uint32_t rem = sig & ((1u << drop) - 1u);
    const std::uint32_t half_ulp = 1u << (drop - 1);
    if (rem > half_ulp || (rem == half_ulp && (keep & 1u))) ++keep;

    if (e2 < -14) {  // subnormal half (keep may have carried into the normal range)
        return static_cast<std::uint16_t>(sign | keep);
    }
    std::int32_t he = e2 + 15;
    if (keep == 0x800u) {  // rounding carried out of the 11-bit significand
        keep = 0x400u;
        ++he;
    }
    if (he >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
    return static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(he) << 10) | (keep & 0x3ffu));
}

inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const int exp_field = (h >> 10) & 0x1f;
    std::uint32_t mant = h & 0x3ffu;

    std::uint32_t bits;
    if (exp_field == 0) {
        if (mant == 0) {
            bits = sign;
        } else {  // subnormal: renormalize
            int e = 0;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                ++e;
            }
            bits = sign | (static_cast<std::uint32_t>(113 - e) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp_field == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | (static_cast<std::uint32_t>(exp_field - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

inline std::vector<std::uint16_t> to_half(const MatF& m) {
    std::vector<std::uint16_t> out(static_cast<std::size_t>(m.size()));
    const float* p = m.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = float_to_half(p[i]);
    return out;
}

inline MatF from_half(const std::vector<std::uint16_t>& v, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(v.size()) != rows * cols)
        throw shape_error("from_half: element count does not match rows*cols");
    MatF m(rows, cols);
    float* p = m.data();
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = half_to_float(v[i]);
    return m;
}

}  // namespace saefd
