#pragma once

// Message wire format (little-endian):
//
//   "EMC1"        4 bytes magic
//   sender        u16
//   receiver      u16
//   dim           u16
//   flags         u8    bit 0 set: quantized payload
//   float payload:      dim x f32
//   quantized payload:  bits u8, range f32, then dim codes
//                       (1 byte each for 4/8 bits, u16 each for 16 bits)

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "emcomm/agents.hpp"
#include "emcomm/bytes.hpp"

namespace emcomm {

inline void check_bits(unsigned bits) {
    if (bits != 4 && bits != 8 && bits != 16) throw std::invalid_argument("quantize: bits must be 4, 8 or 16");
}

// Uniform quantizer on [-range, range] with 2^bits - 1 steps; endpoints are
// representable exactly and the roundtrip error is at most range / (2^bits - 1).
inline std::vector<std::uint16_t> quantize(std::span<const double> payload, unsigned bits, double range = 4.0) {
    check_bits(bits);
    if (!(range > 0.0)) throw std::invalid_argument("quantize: range must be > 0");
    const double levels = std::ldexp(1.0, static_cast<int>(bits)) - 1.0;
    std::vector<std::uint16_t> codes;
    codes.reserve(payload.size());
    for (double x : payload) {
        if (!std::isfinite(x)) throw std::invalid_argument("quantize: non-finite payload");
        const double c = std::clamp(x, -range, range);
        codes.push_back(static_cast<std::uint16_t>(std::lround((c + range) / (2.0 * range) * levels)));
    }
    return codes;
}

inline std::vector<double> dequantize(std::span<const std::uint16_t> codes, unsigned bits, double range = 4.0) {
    check_bits(bits);
    const double levels = std::ldexp(1.0, static_cast<int>(bits)) - 1.0;
    std::vector<double> out;
    out.reserve(codes.size());
    for (auto c : codes) {
        if (c > levels) throw std::invalid_argument("dequantize: code exceeds bit width");
        out.push_back(-range + 2.0 * range * static_cast<double>(c) / levels);
    }
    return out;
}

inline Message quantize_message(Message m, unsigned bits, double range) {
    m.quantized = quantize(m.payload, bits, range);
    m.bits = static_cast<std::uint8_t>(bits);
    m.range = range;
    m.payload = dequantize(*m.quantized, bits, range);
    return m;
}

inline std::vector<std::uint8_t> serialize_message(const Message& m) {
    if (m.payload.size() > 0xffff) throw std::invalid_argument("serialize_message: payload too long");
    ByteWriter w;
    w.raw("EMC1");
    w.u16(m.sender);
    w.u16(m.receiver);
    w.u16(static_cast<std::uint16_t>(m.payload.size()));
    if (m.quantized) {
        check_bits(m.bits);
        if (m.quantized->size() != m.payload.size()) {
            throw std::invalid_argument("serialize_message: quantized length != dim");
        }
        w.u8(1);
        w.u8(m.bits);
        w.f32(static_cast<float>(m.range));
        for (auto c : *m.quantized) {
            if (m.bits == 16) {
                w.u16(c);
            } else {
                w.u8(static_cast<std::uint8_t>(c));
            }
        }
    } else {
        w.u8(0);
        for (double x : m.payload) {
            if (!std::isfinite(x)) throw std::invalid_argument("serialize_message: non-finite payload");
            w.f32(static_cast<float>(x));
        }
    }
    return w.take();
}

inline Message deserialize_message(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("EMC1");
    Message m;
    m.sender = r.u16();
    m.receiver = r.u16();
    const std::size_t dim = r.u16();
    const auto flags = r.u8();
    if (flags & ~1u) throw format_error("unknown message flags");
    if (flags & 1u) {
        m.bits = r.u8();
        if (m.bits != 4 && m.bits != 8 && m.bits != 16) throw format_error("bad quantization width");
        m.range = static_cast<double>(r.f32());
        std::vector<std::uint16_t> codes(dim);
        for (auto& c : codes) c = m.bits == 16 ? r.u16() : r.u8();
        try {
            m.payload = dequantize(codes, m.bits, m.range);
        } catch (const std::invalid_argument& e) {
            throw format_error(e.what());
        }
        m.quantized = std::move(codes);
    } else {
        m.payload.resize(dim);
        for (auto& x : m.payload) x = static_cast<double>(r.f32());
    }
    if (r.remaining() != 0) throw format_error("trailing bytes after message");
    return m;
}

} // namespace emcomm
