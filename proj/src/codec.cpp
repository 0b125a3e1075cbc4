// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/codec.hpp"

#include <zstd.h>

#include "cltforge/error.hpp"

namespace cltforge {

std::string codec_name(Codec c) {
    switch (c) {
        case Codec::none: return "none";
        case Codec::zstd: return "zstd";
    }
    return "unknown";
}

Codec parse_codec(const std::string& name) {
    if (name == "none") return Codec::none;
    if (name == "zstd") return Codec::zstd;
    throw ConfigError("unknown codec '" + name + "' (expected none or zstd)");
}

Bytes compress_block(std::span<const std::uint8_t> raw, Codec codec, int level) {
    if (codec == Codec::none) return Bytes(raw.begin(), raw.end());
    Bytes out(ZSTD_compressBound(raw.size()));
    const std::size_t n = ZSTD_compress(out.data(), out.size(), raw.data(), raw.size(), level);
    if (ZSTD_isError(n)) throw DataError(std::string("zstd compression failed: ") + ZSTD_getErrorName(n));
    out.resize(n);
    return out;
}

Bytes decompress_block(std::span<const std::uint8_t> stored, Codec codec, std::size_t expected_size) {
    if (codec == Codec::none) {
        if (stored.size() != expected_size) throw IntegrityError("raw block length mismatch");
        return Bytes(stored.begin(), stored.end());
    }
    if (codec != Codec::zstd) throw IntegrityError("unknown codec id " + std::to_string(static_cast<int>(codec)));
    const unsigned long long declared = ZSTD_getFrameContentSize(stored.data(), stored.size());
    if (declared == ZSTD_CONTENTSIZE_ERROR || declared == ZSTD_CONTENTSIZE_UNKNOWN || declared != expected_size) {
        throw IntegrityError("zstd frame header is invalid or declares the wrong size");
    }
    Bytes out(expected_size);
    const std::size_t n = ZSTD_decompress(out.data(), out.size(), stored.data(), stored.size());
    if (ZSTD_isError(n)) throw IntegrityError(std::string("zstd: ") + ZSTD_getErrorName(n));
    if (n != expected_size) throw IntegrityError("zstd frame expanded to the wrong size");
    return out;
}

}  // namespace cltforge
