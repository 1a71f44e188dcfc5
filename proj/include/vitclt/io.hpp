#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian scalar encoding shared by the trace and checkpoint formats.
namespace vitclt::io {

template <typename U>
U byteswap_if_big(U v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        U out{};
        auto* src = reinterpret_cast<const unsigned char*>(&v);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
        return out;
    }
}

template <typename U>
void put(std::vector<unsigned char>& buf, U v) {
    v = byteswap_if_big(v);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(U));
}

inline void put_f32(std::vector<unsigned char>& buf, float f) {
    put(buf, std::bit_cast<std::uint32_t>(f));
}

template <typename U>
U get(std::span<const unsigned char> buf, std::size_t offset) {
    U v;
    std::memcpy(&v, buf.data() + offset, sizeof(U));
    return byteswap_if_big(v);
}

inline void write_f32s(std::ostream& os, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(float)));
    } else {
        std::vector<unsigned char> buf;
        buf.reserve(values.size() * 4);
        for (float f : values) put_f32(buf, f);
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
}

inline void read_f32s(std::istream& is, std::span<float> out) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(float)));
    if (!is) throw std::runtime_error("truncated payload");
    if constexpr (std::endian::native != std::endian::little) {
        for (auto& f : out) f = std::bit_cast<float>(byteswap_if_big(std::bit_cast<std::uint32_t>(f)));
    }
}

}  // namespace vitclt::io
