// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk cache of per-layer MLP input/output activations. Each chunk holds
// a fixed number of token rows, quantized with one symmetric scale per
// (layer, stream) and compressed on its own. Byte layout: docs/cache_format.md.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cltforge/binary_io.hpp"
#include "cltforge/codec.hpp"
#include "cltforge/host_model.hpp"
#include "cltforge/numeric.hpp"

namespace cltforge {

enum class QuantMode : std::uint8_t { int8 = 0, int4 = 1, int2 = 2, fp16 = 3 };

std::string quant_mode_name(QuantMode m);
QuantMode parse_quant_mode(const std::string& name);
/// Largest quantized magnitude M: 127 / 7 / 1. Throws for fp16.
int quant_levels(QuantMode m);
/// Bits per stored value: 8 / 4 / 2 / 16.
int quant_bits(QuantMode m);

struct QuantizedLayer {
    float scale = 1.0f;
    std::vector<std::int8_t> q;
};

/// scale = max|x| / M, q = round_half_away(x / scale) clamped to [−M, M];
/// an all-zero input gives scale 1 and q = 0. NaN/Inf raise DataError.
QuantizedLayer quantize_layer(std::span<const float> x, QuantMode mode);
std::vector<float> dequantize_layer(float scale, std::span<const std::int8_t> q, QuantMode mode);

/// Two's-complement values packed LSB-first within each byte; the final byte
/// is zero-padded.
Bytes pack_ints(std::span<const std::int8_t> q, QuantMode mode);
std::vector<std::int8_t> unpack_ints(std::span<const std::uint8_t> packed, std::size_t count, QuantMode mode);

struct CacheConfig {
    std::string model_id = "toy-host";
    QuantMode quant_mode = QuantMode::int8;
    Codec codec = Codec::zstd;
    int codec_level = 3;
    std::size_t tokens_per_chunk = 1024;
    /// Normalization factors come from the first norm_batches × norm_batch_tokens tokens.
    std::size_t norm_batches = 16;
    std::size_t norm_batch_tokens = 4096;
};

struct CacheHeader {
    std::uint32_t version = 1;
    std::string model_id;
    std::uint32_t num_layers = 0;
    std::uint32_t d_model = 0;
    std::uint32_t tokens_per_chunk = 0;
    QuantMode quant_mode = QuantMode::int8;
    Codec codec = Codec::zstd;
    std::int32_t codec_level = 3;
    std::uint64_t total_tokens = 0;
    std::uint64_t num_chunks = 0;
    std::uint32_t norm_batches = 0;
    std::uint32_t norm_batch_tokens = 0;
    std::vector<float> input_norm;   // [layer], > 0
    std::vector<float> output_norm;  // [layer], > 0

    friend bool operator==(const CacheHeader&, const CacheHeader&) = default;
};

Bytes serialize_cache_header(const CacheHeader& h);
CacheHeader deserialize_cache_header(std::span<const std::uint8_t> bytes);

/// Token rows for every layer. inputs/outputs[layer] are n × d. Sequence ids
/// and positions are filled by the on-the-fly source only.
struct ActivationBatch {
    std::uint64_t chunk_index = 0;
    std::vector<TokenId> tokens;
    std::vector<std::uint32_t> sequence_ids;
    std::vector<std::uint32_t> positions;
    std::vector<Tensor2> inputs;
    std::vector<Tensor2> outputs;

    std::size_t size() const noexcept { return tokens.size(); }
};

/// Per-layer divisors applied to MLP inputs and outputs.
struct NormFactors {
    std::vector<float> input;
    std::vector<float> output;
};

/// Captures the corpus with the host model and writes header.cltc plus
/// chunk_%06d.cltz files into `dir` (created if needed). Returns the header.
CacheHeader write_cache(const HostModel& model, std::span<const TokenSequence> corpus, const CacheConfig& cfg,
                        const std::filesystem::path& dir);

std::filesystem::path chunk_path(const std::filesystem::path& dir, std::uint64_t index);

enum class ReadMode {
    partition,  ///< chunks dealt round-robin: worker w gets indices ≡ w (mod W)
    broadcast,  ///< every worker gets every chunk, same order
};

/// Chunk indices a worker reads, in stream order.
std::vector<std::uint64_t> assigned_chunks(std::uint64_t num_chunks, std::size_t worker_id,
                                           std::size_t num_workers, ReadMode mode);

class ActivationSource {
public:
    virtual ~ActivationSource() = default;
    virtual std::optional<ActivationBatch> next() = 0;
    /// Restart from the first batch.
    virtual void reset() = 0;
    virtual std::size_t num_layers() const = 0;
    virtual std::size_t d_model() const = 0;
};

class ActivationCache {
public:
    explicit ActivationCache(std::filesystem::path dir);

    const CacheHeader& header() const noexcept { return header_; }
    const std::filesystem::path& dir() const noexcept { return dir_; }

    /// Decodes one chunk. normalize=true divides every row by its layer's
    /// factor. Codec failures and length mismatches raise IntegrityError
    /// naming the chunk.
    ActivationBatch read_chunk(std::uint64_t index, bool normalize = true) const;
    /// Stored (compressed) byte size of every chunk file.
    std::uint64_t stored_bytes() const;

private:
    std::filesystem::path dir_;
    CacheHeader header_;
};

/// Streams a worker's share of a cache.
class ChunkStream final : public ActivationSource {
public:
    ChunkStream(std::shared_ptr<const ActivationCache> cache, std::size_t worker_id, std::size_t num_workers,
                ReadMode mode, bool normalize = true);

    std::optional<ActivationBatch> next() override;
    void reset() override { cursor_ = 0; }
    std::size_t num_layers() const override { return cache_->header().num_layers; }
    std::size_t d_model() const override { return cache_->header().d_model; }
    const std::vector<std::uint64_t>& chunks() const noexcept { return chunks_; }

private:
    std::shared_ptr<const ActivationCache> cache_;
    std::vector<std::uint64_t> chunks_;
    std::size_t cursor_ = 0;
    bool normalize_;
};

/// Batches held in memory, dealt to workers like cache chunks.
class MemorySource final : public ActivationSource {
public:
    MemorySource(std::shared_ptr<const std::vector<ActivationBatch>> batches, std::size_t worker_id = 0,
                 std::size_t num_workers = 1, ReadMode mode = ReadMode::broadcast);

    std::optional<ActivationBatch> next() override;
    void reset() override { cursor_ = 0; }
    std::size_t num_layers() const override;
    std::size_t d_model() const override;

private:
    std::shared_ptr<const std::vector<ActivationBatch>> batches_;
    std::vector<std::uint64_t> order_;
    std::size_t cursor_ = 0;
};

/// Runs the host model over sequences as they are requested; each batch holds
/// `sequences_per_batch` whole sequences, normalized with the given factors.
class OnTheFlySource final : public ActivationSource {
public:
    OnTheFlySource(const HostModel& model, std::span<const TokenSequence> corpus, NormFactors norms,
                   std::size_t sequences_per_batch);

    std::optional<ActivationBatch> next() override;
    void reset() override { cursor_ = 0; }
    std::size_t num_layers() const override { return model_.config.num_layers; }
    std::size_t d_model() const override { return model_.config.d_model; }

private:
    const HostModel& model_;
    std::span<const TokenSequence> corpus_;
    NormFactors norms_;
    std::size_t per_batch_;
    std::size_t cursor_ = 0;
};

struct QualityReport {
    QuantMode mode = QuantMode::int8;
    std::vector<double> input_quality;   // [layer], 1 − ‖x̂−x‖²/‖x‖²
    std::vector<double> output_quality;  // [layer]
    double overall = 0.0;
};

/// Compares the cache's decoded (unnormalized) rows with uncompressed
/// captures of the same corpus, in corpus order.
QualityReport reconstruction_quality(const ActivationCache& cache, std::span<const CapturedActivations> reference);

}  // namespace cltforge
