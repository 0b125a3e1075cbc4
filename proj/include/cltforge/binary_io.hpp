// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian byte buffers, whole-file I/O and hashing shared by every
// on-disk format in the project.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cltforge {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v);
    void f64(double v);
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    /// Raw magic / fixed tag, no length prefix.
    void tag(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    /// u32 length prefix followed by the UTF-8 bytes.
    void str(std::string_view s);
    void f32_array(std::span<const float> v);

    std::size_t size() const noexcept { return buf_.size(); }
    Bytes& buffer() noexcept { return buf_; }
    Bytes take() noexcept { return std::move(buf_); }

private:
    Bytes buf_;
};

/// Bounds-checked reader. Overruns raise IntegrityError naming `context`.
class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string context)
        : data_(data), context_(std::move(context)) {}

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32();
    double f64();
    std::span<const std::uint8_t> bytes(std::size_t n);
    /// Fails unless the next bytes equal `expected`.
    void expect_tag(std::string_view expected);
    std::string str();
    std::vector<float> f32_array(std::size_t n);

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    void seek(std::size_t pos);
    const std::string& context() const noexcept { return context_; }

private:
    void need(std::size_t n);

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::string context_;
};

Bytes read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> data,
                      std::uint64_t h = 0xcbf29ce484222325ull) noexcept;
std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) noexcept;

/// IEEE-754 binary16 conversion, round-to-nearest-even, with overflow to inf.
std::uint16_t float_to_half(float f) noexcept;
float half_to_float(std::uint16_t h) noexcept;

}  // namespace cltforge
