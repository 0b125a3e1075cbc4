// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/activation_cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <system_error>

#include "cltforge/error.hpp"

namespace cltforge {

namespace {

constexpr std::string_view kMagic{"CLTF-AC\0", 8};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kHeaderRecord = 1;
constexpr std::uint32_t kChunkRecord = 2;

std::int8_t round_half_away(double v) {
    const double r = v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
    return static_cast<std::int8_t>(r);
}

std::size_t plane_bytes(std::size_t count, QuantMode mode) {
    return (count * static_cast<std::size_t>(quant_bits(mode)) + 7) / 8;
}

// Rows of one sequence batch waiting to be flushed into a chunk.
struct PendingRows {
    std::vector<TokenId> tokens;
    std::vector<std::vector<float>> in;   // [layer] flattened rows
    std::vector<std::vector<float>> out;  // [layer]

    explicit PendingRows(std::size_t layers) : in(layers), out(layers) {}
    std::size_t size() const { return tokens.size(); }
};

Bytes encode_chunk_block(const PendingRows& rows, std::size_t begin, std::size_t n, std::size_t layers,
                         std::size_t d, QuantMode mode) {
    ByteWriter raw;
    raw.u32(static_cast<std::uint32_t>(n));
    raw.u32(static_cast<std::uint32_t>(layers));
    raw.u32(static_cast<std::uint32_t>(d));

    std::vector<Bytes> planes;
    std::vector<float> scales;
    for (std::size_t l = 0; l < layers; ++l) {
        for (const auto* stream : {&rows.in[l], &rows.out[l]}) {
            std::span<const float> x(stream->data() + begin * d, n * d);
            if (mode == QuantMode::fp16) {
                if (!all_finite(x)) throw DataError("non-finite activation in cache input");
                ByteWriter w;
                for (float v : x) w.u16(float_to_half(v));
                scales.push_back(1.0f);
                planes.push_back(w.take());
            } else {
                QuantizedLayer ql = quantize_layer(x, mode);
                scales.push_back(ql.scale);
                planes.push_back(pack_ints(ql.q, mode));
            }
        }
    }
    for (float s : scales) raw.f32(s);
    for (std::size_t i = 0; i < n; ++i) raw.u32(rows.tokens[begin + i]);
    for (const auto& p : planes) raw.bytes(p);
    return raw.take();
}

}  // namespace

std::string quant_mode_name(QuantMode m) {
    switch (m) {
        case QuantMode::int8: return "int8";
        case QuantMode::int4: return "int4";
        case QuantMode::int2: return "int2";
        case QuantMode::fp16: return "fp16";
    }
    return "unknown";
}

QuantMode parse_quant_mode(const std::string& name) {
    if (name == "int8") return QuantMode::int8;
    if (name == "int4") return QuantMode::int4;
    if (name == "int2") return QuantMode::int2;
    if (name == "fp16") return QuantMode::fp16;
    throw ConfigError("unknown quant mode '" + name + "' (expected int8, int4, int2 or fp16)");
}

int quant_levels(QuantMode m) {
    switch (m) {
        case QuantMode::int8: return 127;
        case QuantMode::int4: return 7;
        case QuantMode::int2: return 1;
        case QuantMode::fp16: break;
    }
    throw InputError("fp16 baseline is not an integer quantization mode");
}

int quant_bits(QuantMode m) {
    switch (m) {
        case QuantMode::int8: return 8;
        case QuantMode::int4: return 4;
        case QuantMode::int2: return 2;
        case QuantMode::fp16: return 16;
    }
    return 0;
}

QuantizedLayer quantize_layer(std::span<const float> x, QuantMode mode) {
    const int M = quant_levels(mode);
    float maxabs = 0.0f;
    for (float v : x) {
        if (!std::isfinite(v)) throw DataError("NaN or Inf in quantization input");
        maxabs = std::max(maxabs, std::fabs(v));
    }
    QuantizedLayer out;
    out.q.assign(x.size(), 0);
    if (maxabs == 0.0f) {
        out.scale = 1.0f;
        return out;
    }
    out.scale = maxabs / static_cast<float>(M);
    // x/scale evaluated as x·M/maxabs in double: the largest element lands on
    // exactly ±M and the half-away rounding sees the true quotient.
    const double k = static_cast<double>(M) / static_cast<double>(maxabs);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = static_cast<double>(x[i]) * k;
        out.q[i] = std::clamp<std::int8_t>(round_half_away(r), static_cast<std::int8_t>(-M),
                                           static_cast<std::int8_t>(M));
    }
    return out;
}

std::vector<float> dequantize_layer(float scale, std::span<const std::int8_t> q, QuantMode mode) {
    const int M = quant_levels(mode);
    std::vector<float> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < -M || q[i] > M) throw IntegrityError("quantized value outside the mode's range");
        out[i] = static_cast<float>(q[i]) * scale;
    }
    return out;
}

Bytes pack_ints(std::span<const std::int8_t> q, QuantMode mode) {
    const int bits = quant_bits(mode);
    if (mode == QuantMode::fp16) throw InputError("pack_ints does not handle fp16");
    Bytes out(plane_bytes(q.size(), mode), 0);
    if (bits == 8) {
        for (std::size_t i = 0; i < q.size(); ++i) out[i] = static_cast<std::uint8_t>(q[i]);
        return out;
    }
    const unsigned mask = (1u << bits) - 1u;
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    for (std::size_t i = 0; i < q.size(); ++i) {
        const unsigned v = static_cast<unsigned>(static_cast<std::uint8_t>(q[i])) & mask;
        out[i / per_byte] |= static_cast<std::uint8_t>(v << (bits * (i % per_byte)));
    }
    return out;
}

std::vector<std::int8_t> unpack_ints(std::span<const std::uint8_t> packed, std::size_t count, QuantMode mode) {
    if (mode == QuantMode::fp16) throw InputError("unpack_ints does not handle fp16");
    if (packed.size() != plane_bytes(count, mode)) throw IntegrityError("packed plane has the wrong length");
    const int bits = quant_bits(mode);
    std::vector<std::int8_t> out(count);
    if (bits == 8) {
        for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<std::int8_t>(packed[i]);
        return out;
    }
    const unsigned mask = (1u << bits) - 1u;
    const unsigned sign = 1u << (bits - 1);
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned v = (packed[i / per_byte] >> (bits * (i % per_byte))) & mask;
        out[i] = static_cast<std::int8_t>((v & sign) ? static_cast<int>(v) - (1 << bits) : static_cast<int>(v));
    }
    return out;
}

Bytes serialize_cache_header(const CacheHeader& h) {
    ByteWriter w;
    w.tag(kMagic);
    w.u32(h.version);
    w.u32(kHeaderRecord);
    w.str(h.model_id);
    w.u32(h.num_layers);
    w.u32(h.d_model);
    w.u32(h.tokens_per_chunk);
    w.u8(static_cast<std::uint8_t>(h.quant_mode));
    w.u8(static_cast<std::uint8_t>(h.codec));
    w.u16(0);
    w.i32(h.codec_level);
    w.u64(h.total_tokens);
    w.u64(h.num_chunks);
    w.u32(h.norm_batches);
    w.u32(h.norm_batch_tokens);
    w.f32_array(h.input_norm);
    w.f32_array(h.output_norm);
    const std::uint64_t sum = fnv1a64(w.buffer());
    w.u64(sum);
    return w.take();
}

CacheHeader deserialize_cache_header(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "cache header");
    r.expect_tag(kMagic);
    CacheHeader h;
    h.version = r.u32();
    if (h.version != kVersion) throw IntegrityError("cache header: unsupported version " + std::to_string(h.version));
    if (r.u32() != kHeaderRecord) throw IntegrityError("cache header: wrong record type");
    h.model_id = r.str();
    h.num_layers = r.u32();
    h.d_model = r.u32();
    h.tokens_per_chunk = r.u32();
    const std::uint8_t qm = r.u8();
    if (qm > 3) throw IntegrityError("cache header: unknown quant mode " + std::to_string(qm));
    h.quant_mode = static_cast<QuantMode>(qm);
    const std::uint8_t codec = r.u8();
    if (codec > 1) throw IntegrityError("cache header: unknown codec " + std::to_string(codec));
    h.codec = static_cast<Codec>(codec);
    r.u16();
    h.codec_level = r.i32();
    h.total_tokens = r.u64();
    h.num_chunks = r.u64();
    h.norm_batches = r.u32();
    h.norm_batch_tokens = r.u32();
    h.input_norm = r.f32_array(h.num_layers);
    h.output_norm = r.f32_array(h.num_layers);
    const std::size_t body = r.position();
    const std::uint64_t sum = r.u64();
    if (sum != fnv1a64(bytes.subspan(0, body))) throw IntegrityError("cache header: checksum mismatch");
    if (h.tokens_per_chunk == 0) throw IntegrityError("cache header: tokens_per_chunk is 0");
    for (float v : h.input_norm)
        if (!(v > 0)) throw IntegrityError("cache header: non-positive normalization factor");
    for (float v : h.output_norm)
        if (!(v > 0)) throw IntegrityError("cache header: non-positive normalization factor");
    return h;
}

std::filesystem::path chunk_path(const std::filesystem::path& dir, std::uint64_t index) {
    char name[32];
    std::snprintf(name, sizeof name, "chunk_%06llu.cltz", static_cast<unsigned long long>(index));
    return dir / name;
}

CacheHeader write_cache(const HostModel& model, std::span<const TokenSequence> corpus, const CacheConfig& cfg,
                        const std::filesystem::path& dir) {
    if (cfg.tokens_per_chunk == 0) throw ConfigError("tokens_per_chunk must be > 0");
    if (cfg.norm_batches == 0 || cfg.norm_batch_tokens == 0)
        throw ConfigError("normalization needs at least one batch of at least one token");
    const std::size_t L = model.config.num_layers;
    const std::size_t d = model.config.d_model;

    std::size_t total = 0;
    for (const auto& s : corpus) total += s.size();
    const std::size_t norm_tokens = cfg.norm_batches * cfg.norm_batch_tokens;
    if (total < norm_tokens) {
        throw ConfigError("corpus has " + std::to_string(total) + " tokens but normalization needs " +
                          std::to_string(cfg.norm_batches) + " batches of " + std::to_string(cfg.norm_batch_tokens));
    }

    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create cache directory " + dir.string() + ": " + ec.message());

    CacheHeader h;
    h.version = kVersion;
    h.model_id = cfg.model_id;
    h.num_layers = static_cast<std::uint32_t>(L);
    h.d_model = static_cast<std::uint32_t>(d);
    h.tokens_per_chunk = static_cast<std::uint32_t>(cfg.tokens_per_chunk);
    h.quant_mode = cfg.quant_mode;
    h.codec = cfg.codec;
    h.codec_level = cfg.codec_level;
    h.norm_batches = static_cast<std::uint32_t>(cfg.norm_batches);
    h.norm_batch_tokens = static_cast<std::uint32_t>(cfg.norm_batch_tokens);

    // Normalization: mean row norm over the first norm_tokens rows.
    std::vector<double> in_sum(L, 0.0), out_sum(L, 0.0);
    std::size_t seen = 0;
    for (const auto& seq : corpus) {
        if (seen >= norm_tokens) break;
        const CapturedActivations cap = forward_with_capture(model, seq);
        const std::size_t take = std::min(seq.size(), norm_tokens - seen);
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t t = 0; t < take; ++t) {
                in_sum[l] += std::sqrt(dot_f64(cap.mlp_in[l].row(t), cap.mlp_in[l].row(t)));
                out_sum[l] += std::sqrt(dot_f64(cap.mlp_out[l].row(t), cap.mlp_out[l].row(t)));
            }
        seen += take;
    }
    for (std::size_t l = 0; l < L; ++l) {
        const float fi = static_cast<float>(in_sum[l] / static_cast<double>(seen));
        const float fo = static_cast<float>(out_sum[l] / static_cast<double>(seen));
        h.input_norm.push_back(fi > 0 ? fi : 1.0f);
        h.output_norm.push_back(fo > 0 ? fo : 1.0f);
    }

    PendingRows pending(L);
    std::uint64_t chunk = 0;
    auto flush = [&](std::size_t n) {
        const Bytes raw = encode_chunk_block(pending, 0, n, L, d, cfg.quant_mode);
        const Bytes stored = compress_block(raw, cfg.codec, cfg.codec_level);
        ByteWriter w;
        w.tag(kMagic);
        w.u32(kVersion);
        w.u32(kChunkRecord);
        w.u64(chunk);
        w.u32(static_cast<std::uint32_t>(n));
        w.u8(static_cast<std::uint8_t>(cfg.codec));
        w.u8(static_cast<std::uint8_t>(cfg.quant_mode));
        w.u16(0);
        w.u64(raw.size());
        w.u64(stored.size());
        w.u64(fnv1a64(raw));
        w.bytes(stored);
        write_file_atomic(chunk_path(dir, chunk), w.buffer());
        ++chunk;
        pending.tokens.erase(pending.tokens.begin(), pending.tokens.begin() + static_cast<std::ptrdiff_t>(n));
        for (std::size_t l = 0; l < L; ++l) {
            pending.in[l].erase(pending.in[l].begin(), pending.in[l].begin() + static_cast<std::ptrdiff_t>(n * d));
            pending.out[l].erase(pending.out[l].begin(), pending.out[l].begin() + static_cast<std::ptrdiff_t>(n * d));
        }
    };

    for (const auto& seq : corpus) {
        if (seq.empty()) continue;
        const CapturedActivations cap = forward_with_capture(model, seq);
        pending.tokens.insert(pending.tokens.end(), seq.begin(), seq.end());
        for (std::size_t l = 0; l < L; ++l) {
            const auto& a = cap.mlp_in[l].storage();
            const auto& b = cap.mlp_out[l].storage();
            pending.in[l].insert(pending.in[l].end(), a.begin(), a.end());
            pending.out[l].insert(pending.out[l].end(), b.begin(), b.end());
        }
        while (pending.size() >= cfg.tokens_per_chunk) flush(cfg.tokens_per_chunk);
    }
    if (pending.size() > 0) flush(pending.size());

    h.total_tokens = total;
    h.num_chunks = chunk;
    write_file_atomic(dir / "header.cltc", serialize_cache_header(h));
    return h;
}

std::vector<std::uint64_t> assigned_chunks(std::uint64_t num_chunks, std::size_t worker_id,
                                           std::size_t num_workers, ReadMode mode) {
    if (num_workers == 0 || worker_id >= num_workers)
        throw InputError("worker_id " + std::to_string(worker_id) + " out of range for " +
                         std::to_string(num_workers) + " workers");
    std::vector<std::uint64_t> out;
    if (mode == ReadMode::broadcast) {
        for (std::uint64_t i = 0; i < num_chunks; ++i) out.push_back(i);
    } else {
        for (std::uint64_t i = worker_id; i < num_chunks; i += num_workers) out.push_back(i);
    }
    return out;
}

ActivationCache::ActivationCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    const auto hp = dir_ / "header.cltc";
    if (!std::filesystem::exists(hp)) throw IoError("cache header not found: " + hp.string());
    header_ = deserialize_cache_header(read_file(hp));
}

ActivationBatch ActivationCache::read_chunk(std::uint64_t index, bool normalize) const {
    const auto path = chunk_path(dir_, index);
    const std::string ctx = "chunk " + std::to_string(index) + " (" + path.filename().string() + ")";
    if (index >= header_.num_chunks) throw LookupError(ctx + " is beyond the cache's chunk count");
    Bytes file;
    try {
        file = read_file(path);
    } catch (const IoError& e) {
        throw IntegrityError(ctx + ": " + e.what());
    }
    const std::size_t L = header_.num_layers, d = header_.d_model;
    ActivationBatch batch;
    batch.chunk_index = index;
    try {
        ByteReader r(file, ctx);
        r.expect_tag(kMagic);
        if (r.u32() != kVersion) throw IntegrityError("unsupported chunk version");
        if (r.u32() != kChunkRecord) throw IntegrityError("wrong record type");
        if (r.u64() != index) throw IntegrityError("chunk index field does not match file name");
        const std::uint32_t n = r.u32();
        const auto codec = static_cast<Codec>(r.u8());
        const auto mode = static_cast<QuantMode>(r.u8());
        r.u16();
        const std::uint64_t raw_len = r.u64();
        const std::uint64_t stored_len = r.u64();
        const std::uint64_t raw_sum = r.u64();
        if (codec != header_.codec || mode != header_.quant_mode)
            throw IntegrityError("codec or quant mode differs from the cache header");
        if (stored_len != r.remaining()) throw IntegrityError("stored length does not match file size");
        const Bytes raw = decompress_block(r.bytes(stored_len), codec, raw_len);
        if (fnv1a64(raw) != raw_sum) throw IntegrityError("payload checksum mismatch");

        ByteReader b(raw, ctx + " payload");
        if (b.u32() != n || b.u32() != L || b.u32() != d) throw IntegrityError("payload shape disagrees with header");
        std::vector<float> scales = b.f32_array(2 * L);
        batch.tokens.resize(n);
        for (auto& t : batch.tokens) t = b.u32();
        const std::size_t count = static_cast<std::size_t>(n) * d;
        for (std::size_t l = 0; l < L; ++l) {
            for (int stream = 0; stream < 2; ++stream) {
                std::vector<float> vals;
                if (mode == QuantMode::fp16) {
                    vals.resize(count);
                    for (auto& v : vals) v = half_to_float(b.u16());
                } else {
                    const auto q = unpack_ints(b.bytes(plane_bytes(count, mode)), count, mode);
                    vals = dequantize_layer(scales[2 * l + stream], q, mode);
                }
                if (normalize) {
                    const float f = stream == 0 ? header_.input_norm[l] : header_.output_norm[l];
                    for (auto& v : vals) v /= f;
                }
                Tensor2 t(n, d, std::move(vals));
                (stream == 0 ? batch.inputs : batch.outputs).push_back(std::move(t));
            }
        }
        if (b.remaining() != 0) throw IntegrityError("trailing bytes after payload");
    } catch (const IntegrityError& e) {
        const std::string what = e.what();
        if (what.find(ctx) != std::string::npos) throw;
        throw IntegrityError(ctx + ": " + what);
    }
    return batch;
}

std::uint64_t ActivationCache::stored_bytes() const {
    std::uint64_t total = 0;
    for (std::uint64_t i = 0; i < header_.num_chunks; ++i) total += std::filesystem::file_size(chunk_path(dir_, i));
    return total;
}

ChunkStream::ChunkStream(std::shared_ptr<const ActivationCache> cache, std::size_t worker_id,
                         std::size_t num_workers, ReadMode mode, bool normalize)
    : cache_(std::move(cache)), normalize_(normalize) {
    chunks_ = assigned_chunks(cache_->header().num_chunks, worker_id, num_workers, mode);
}

std::optional<ActivationBatch> ChunkStream::next() {
    if (cursor_ >= chunks_.size()) return std::nullopt;
    return cache_->read_chunk(chunks_[cursor_++], normalize_);
}

MemorySource::MemorySource(std::shared_ptr<const std::vector<ActivationBatch>> batches, std::size_t worker_id,
                           std::size_t num_workers, ReadMode mode)
    : batches_(std::move(batches)) {
    if (!batches_ || batches_->empty()) throw InputError("memory source needs at least one batch");
    order_ = assigned_chunks(batches_->size(), worker_id, num_workers, mode);
}

std::optional<ActivationBatch> MemorySource::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    ActivationBatch b = (*batches_)[order_[cursor_++]];
    return b;
}

std::size_t MemorySource::num_layers() const { return batches_->front().inputs.size(); }

std::size_t MemorySource::d_model() const { return batches_->front().inputs.front().cols(); }

OnTheFlySource::OnTheFlySource(const HostModel& model, std::span<const TokenSequence> corpus, NormFactors norms,
                               std::size_t sequences_per_batch)
    : model_(model), corpus_(corpus), norms_(std::move(norms)), per_batch_(sequences_per_batch) {
    if (per_batch_ == 0) throw ConfigError("sequences_per_batch must be > 0");
    const std::size_t L = model_.config.num_layers;
    if (norms_.input.empty()) norms_.input.assign(L, 1.0f);
    if (norms_.output.empty()) norms_.output.assign(L, 1.0f);
    if (norms_.input.size() != L || norms_.output.size() != L)
        throw ShapeError("normalization factors do not match the model's layer count");
}

std::optional<ActivationBatch> OnTheFlySource::next() {
    if (cursor_ >= corpus_.size()) return std::nullopt;
    const std::size_t L = model_.config.num_layers, d = model_.config.d_model;
    const std::size_t begin = cursor_;
    const std::size_t end = std::min(corpus_.size(), begin + per_batch_);
    cursor_ = end;

    ActivationBatch batch;
    batch.chunk_index = begin / per_batch_;
    std::vector<std::vector<float>> in(L), out(L);
    for (std::size_t s = begin; s < end; ++s) {
        const auto& seq = corpus_[s];
        if (seq.empty()) continue;
        const CapturedActivations cap = forward_with_capture(model_, seq);
        for (std::size_t p = 0; p < seq.size(); ++p) {
            batch.tokens.push_back(seq[p]);
            batch.sequence_ids.push_back(static_cast<std::uint32_t>(s));
            batch.positions.push_back(static_cast<std::uint32_t>(p));
        }
        for (std::size_t l = 0; l < L; ++l) {
            for (float v : cap.mlp_in[l].storage()) in[l].push_back(v / norms_.input[l]);
            for (float v : cap.mlp_out[l].storage()) out[l].push_back(v / norms_.output[l]);
        }
    }
    const std::size_t n = batch.tokens.size();
    for (std::size_t l = 0; l < L; ++l) {
        batch.inputs.emplace_back(n, d, std::move(in[l]));
        batch.outputs.emplace_back(n, d, std::move(out[l]));
    }
    return batch;
}

QualityReport reconstruction_quality(const ActivationCache& cache, std::span<const CapturedActivations> reference) {
    const auto& h = cache.header();
    const std::size_t L = h.num_layers, d = h.d_model;
    std::vector<double> err_in(L, 0.0), en_in(L, 0.0), err_out(L, 0.0), en_out(L, 0.0);

    std::size_t ref_seq = 0, ref_pos = 0;
    for (std::uint64_t c = 0; c < h.num_chunks; ++c) {
        const ActivationBatch b = cache.read_chunk(c, false);
        for (std::size_t t = 0; t < b.size(); ++t) {
            while (ref_seq < reference.size() && ref_pos >= reference[ref_seq].tokens.size()) {
                ++ref_seq;
                ref_pos = 0;
            }
            if (ref_seq >= reference.size()) throw ShapeError("reference activations shorter than the cache");
            const auto& ref = reference[ref_seq];
            for (std::size_t l = 0; l < L; ++l) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double xi = ref.mlp_in[l](ref_pos, j), yi = b.inputs[l](t, j);
                    const double xo = ref.mlp_out[l](ref_pos, j), yo = b.outputs[l](t, j);
                    err_in[l] += (yi - xi) * (yi - xi);
                    en_in[l] += xi * xi;
                    err_out[l] += (yo - xo) * (yo - xo);
                    en_out[l] += xo * xo;
                }
            }
            ++ref_pos;
        }
    }
    QualityReport rep;
    rep.mode = h.quant_mode;
    double te = 0.0, tn = 0.0;
    auto q = [](double e, double n) { return n > 0 ? 1.0 - e / n : (e == 0 ? 1.0 : 0.0); };
    for (std::size_t l = 0; l < L; ++l) {
        rep.input_quality.push_back(q(err_in[l], en_in[l]));
        rep.output_quality.push_back(q(err_out[l], en_out[l]));
        te += err_in[l] + err_out[l];
        tn += en_in[l] + en_out[l];
    }
    rep.overall = q(te, tn);
    return rep;
}

}  // namespace cltforge
