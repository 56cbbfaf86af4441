#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <type_traits>
#include <string>
#include <vector>

#include "bnn/error.hpp"

namespace bnn::io {

/// Little-endian encoder into a byte buffer.
class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <class U>
    void le(U v) {
        static_assert(std::is_integral_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i)
            buf_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

/// Little-endian decoder; every failure reports the byte offset.
class Reader {
public:
    Reader(std::vector<std::uint8_t> data, std::string what)
        : data_(std::move(data)), what_(std::move(what)) {}

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == data_.size(); }

    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(what_ + ": " + msg + " at offset " + std::to_string(pos_));
    }
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) fail("truncated (need " + std::to_string(n) + " bytes)");
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    template <class U>
    U le() {
        need(sizeof(U));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return static_cast<U>(v);
    }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t max_len = 1 << 20) {
        const auto n = u32();
        if (n > max_len) fail("string length " + std::to_string(n) + " too large");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    void expect_magic(const char (&magic)[9]) {
        char got[8];
        bytes(got, 8);
        if (std::memcmp(got, magic, 8) != 0) {
            pos_ -= 8;
            fail("bad magic");
        }
    }

private:
    std::vector<std::uint8_t> data_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto n = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> data(n);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n));
    if (!in) throw FormatError("failed reading " + path);
    return data;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error("failed writing " + path);
}

}  // namespace bnn::io
