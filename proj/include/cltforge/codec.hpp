// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "cltforge/binary_io.hpp"

namespace cltforge {

enum class Codec : std::uint8_t {
    none = 0,
    zstd = 1,  ///< standard zstd frame format
};

std::string codec_name(Codec c);
Codec parse_codec(const std::string& name);

Bytes compress_block(std::span<const std::uint8_t> raw, Codec codec, int level);
/// Throws IntegrityError when the frame is malformed or does not expand to
/// exactly `expected_size` bytes.
Bytes decompress_block(std::span<const std::uint8_t> stored, Codec codec, std::size_t expected_size);

}  // namespace cltforge
