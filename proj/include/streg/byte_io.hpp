// Little-endian stream primitives shared by the binary file formats.
// Readers track a byte offset so parse errors can point at the exact spot.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "streg/errors.hpp"

namespace streg {

struct ByteReader {
    std::ifstream in;
    std::uint64_t offset = 0;
    std::string path;

    ByteReader(const std::string& file_path)
        : in(file_path, std::ios::binary), path(file_path) {
        if (!in) throw DataError(path + ": cannot open for reading");
    }

    void read(void* dst, std::size_t n, const char* what) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n)) {
            throw DataError(path + ": truncated file while reading " + std::string(what) +
                            " at byte offset " + std::to_string(offset));
        }
        offset += n;
    }

    std::uint32_t read_u32(const char* what) {
        unsigned char b[4];
        read(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    }

    std::uint64_t read_u64(const char* what) {
        const std::uint64_t lo = read_u32(what);
        const std::uint64_t hi = read_u32(what);
        return lo | hi << 32;
    }

    float read_f32(const char* what) {
        const std::uint32_t bits = read_u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }

    double read_f64(const char* what) {
        const std::uint64_t bits = read_u64(what);
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }

    std::string read_str(const char* what) {
        const std::uint32_t len = read_u32(what);
        std::string s(len, '\0');
        if (len > 0) read(s.data(), len, what);
        return s;
    }

    /// True when the stream is exactly at end of file.
    bool at_eof() {
        return in.peek() == std::ifstream::traits_type::eof();
    }
};

struct ByteWriter {
    std::ofstream out;
    std::string path;

    ByteWriter(const std::string& file_path)
        : out(file_path, std::ios::binary | std::ios::trunc), path(file_path) {
        if (!out) throw DataError(path + ": cannot open for writing");
    }

    void write(const void* src, std::size_t n) {
        out.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    }

    void write_u32(std::uint32_t v) {
        const unsigned char b[4] = {
            static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
            static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        write(b, 4);
    }

    void write_u64(std::uint64_t v) {
        write_u32(static_cast<std::uint32_t>(v));
        write_u32(static_cast<std::uint32_t>(v >> 32));
    }

    void write_f32(float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        write_u32(bits);
    }

    void write_f64(double d) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        write_u64(bits);
    }

    void write_str(const std::string& s) {
        write_u32(static_cast<std::uint32_t>(s.size()));
        write(s.data(), s.size());
    }

    void finish() {
        out.flush();
        if (!out) throw DataError(path + ": write failed");
    }
};

} // namespace streg
