// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "cltforge/activation_cache.hpp"
#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"

using namespace cltforge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cltforge_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

HostModel toy_host() {
    HostConfig cfg;
    cfg.d_model = 16;
    cfg.d_mlp = 64;
    Rng rng(17);
    return HostModel::random(cfg, rng);
}

std::vector<TokenSequence> toy_corpus(std::size_t tokens, std::uint64_t seed = 4) {
    CorpusSpec spec;
    spec.seq_len = 25;
    spec.num_sequences = tokens / 25;
    Rng rng(seed);
    return make_synthetic_corpus(rng, spec);
}

CacheConfig small_cfg(QuantMode mode) {
    CacheConfig c;
    c.quant_mode = mode;
    c.tokens_per_chunk = 1000;
    c.norm_batches = 4;
    c.norm_batch_tokens = 500;
    return c;
}

}  // namespace

TEST(Quantize, AllZeros) {
    for (auto mode : {QuantMode::int8, QuantMode::int4, QuantMode::int2}) {
        const auto q = quantize_layer(std::vector<float>(5, 0.0f), mode);
        EXPECT_EQ(q.scale, 1.0f);
        for (auto v : q.q) EXPECT_EQ(v, 0);
        for (float v : dequantize_layer(q.scale, q.q, mode)) EXPECT_EQ(v, 0.0f);
    }
}

TEST(Quantize, HandWorkedInt8Example) {
    const auto q = quantize_layer(std::vector<float>{1.0f, -0.5f, 0.25f}, QuantMode::int8);
    EXPECT_FLOAT_EQ(q.scale, 1.0f / 127.0f);
    EXPECT_EQ(q.q, (std::vector<std::int8_t>{127, -64, 32}));
    const auto x = dequantize_layer(q.scale, q.q, QuantMode::int8);
    EXPECT_NEAR(x[0], 1.0, 1e-6);
    EXPECT_NEAR(x[1], -0.50394, 1e-5);
    EXPECT_NEAR(x[2], 0.25197, 1e-5);
}

TEST(Quantize, ErrorBoundedByHalfScaleInEveryMode) {
    Rng rng(99);
    for (auto mode : {QuantMode::int8, QuantMode::int4, QuantMode::int2}) {
        const int M = quant_levels(mode);
        for (int rep = 0; rep < 10000; ++rep) {
            std::vector<float> x(1 + rng.below(24));
            const double mag = std::exp(rng.uniform() * 8 - 4);
            for (auto& v : x) v = static_cast<float>(rng.normal() * mag);
            const auto q = quantize_layer(x, mode);
            const auto y = dequantize_layer(q.scale, q.q, mode);
            for (std::size_t i = 0; i < x.size(); ++i) {
                ASSERT_LE(std::abs(int(q.q[i])), M);
                const float slack = 4 * std::numeric_limits<float>::epsilon() * std::fabs(x[i]) + 1e-30f;
                ASSERT_LE(std::fabs(y[i] - x[i]), q.scale / 2 + slack);
            }
        }
    }
}

TEST(Quantize, Int2UsesOnlyThreeLevels) {
    Rng rng(5);
    std::vector<float> x(1000);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    for (auto v : quantize_layer(x, QuantMode::int2).q) EXPECT_TRUE(v == -1 || v == 0 || v == 1);
}

TEST(Quantize, RejectsNonFinite) {
    EXPECT_THROW(quantize_layer(std::vector<float>{1.0f, NAN}, QuantMode::int8), DataError);
    EXPECT_THROW(quantize_layer(std::vector<float>{INFINITY}, QuantMode::int4), DataError);
}

TEST(Packing, RoundTripsAndPacksLsbFirst) {
    const std::vector<std::int8_t> q4{1, -1, 7, -7, 0};
    const Bytes p4 = pack_ints(q4, QuantMode::int4);
    ASSERT_EQ(p4.size(), 3u);
    EXPECT_EQ(p4[0], 0xF1);  // 1 in the low nibble, -1 (0xF) in the high one
    EXPECT_EQ(p4[2], 0x00);
    EXPECT_EQ(unpack_ints(p4, 5, QuantMode::int4), q4);
    const std::vector<std::int8_t> q2{1, -1, 0, 1, -1};
    const Bytes p2 = pack_ints(q2, QuantMode::int2);
    ASSERT_EQ(p2.size(), 2u);
    EXPECT_EQ(p2[0], 0b01001101);
    EXPECT_EQ(unpack_ints(p2, 5, QuantMode::int2), q2);
}

TEST(CacheWrite, ChunkArithmeticAndHeader) {
    TempDir dir("arith");
    const auto host = toy_host();
    const auto corpus = toy_corpus(10000);
    const auto h = write_cache(host, corpus, small_cfg(QuantMode::int8), dir.path);
    EXPECT_EQ(h.total_tokens, 10000u);
    EXPECT_EQ(h.num_chunks, 10u);
    for (std::uint64_t i = 0; i < 10; ++i) EXPECT_TRUE(fs::exists(chunk_path(dir.path, i)));
    const ActivationCache cache(dir.path);
    EXPECT_EQ(cache.header(), h);
    for (float f : h.input_norm) EXPECT_GT(f, 0.0f);
    for (float f : h.output_norm) EXPECT_GT(f, 0.0f);
    const auto b = cache.read_chunk(3);
    EXPECT_EQ(b.size(), 1000u);
    EXPECT_EQ(b.inputs.size(), 2u);
    EXPECT_EQ(b.outputs[1].cols(), 16u);
}

TEST(CacheWrite, NormalizationFactorIsMeanRowNorm) {
    TempDir dir("norm");
    const auto host = toy_host();
    const auto corpus = toy_corpus(4000);
    const auto cfg = small_cfg(QuantMode::int8);
    const auto h = write_cache(host, corpus, cfg, dir.path);
    double s = 0;
    std::size_t n = 0;
    for (const auto& seq : corpus) {
        const auto cap = forward_with_capture(host, seq);
        for (std::size_t t = 0; t < seq.size() && n < 2000; ++t, ++n) {
            double r = 0;
            for (float v : cap.mlp_out[1].row(t)) r += double(v) * v;
            s += std::sqrt(r);
        }
    }
    EXPECT_NEAR(h.output_norm[1], s / 2000, 1e-4 * s / 2000);

    // Normalized rows have mean norm close to one.
    const ActivationCache cache(dir.path);
    const auto b = cache.read_chunk(0);
    double mean = 0;
    for (std::size_t t = 0; t < b.size(); ++t) mean += std::sqrt(dot_f64(b.inputs[0].row(t), b.inputs[0].row(t)));
    EXPECT_NEAR(mean / b.size(), 1.0, 0.05);
}

TEST(CacheWrite, TooShortForNormalizationIsConfigError) {
    TempDir dir("short");
    auto cfg = small_cfg(QuantMode::int8);
    cfg.norm_batches = 100;
    EXPECT_THROW(write_cache(toy_host(), toy_corpus(1000), cfg, dir.path), ConfigError);
}

TEST(CacheWrite, RewriteIsByteIdentical) {
    TempDir a("det_a"), b("det_b");
    const auto host = toy_host();
    const auto corpus = toy_corpus(3000);
    write_cache(host, corpus, small_cfg(QuantMode::int4), a.path);
    write_cache(host, corpus, small_cfg(QuantMode::int4), b.path);
    for (const auto& e : fs::directory_iterator(a.path))
        EXPECT_EQ(read_file(e.path()), read_file(b.path / e.path().filename())) << e.path();
}

TEST(CacheWrite, Int8AtLeastTwiceSmallerThanFp16) {
    TempDir a("int8"), b("fp16");
    const auto host = toy_host();
    const auto corpus = toy_corpus(10000);
    write_cache(host, corpus, small_cfg(QuantMode::int8), a.path);
    write_cache(host, corpus, small_cfg(QuantMode::fp16), b.path);
    const double ratio = double(ActivationCache(b.path).stored_bytes()) / double(ActivationCache(a.path).stored_bytes());
    EXPECT_GE(ratio, 2.0);
}

TEST(CacheRead, SingleWorkerModesAgree) {
    TempDir dir("modes");
    write_cache(toy_host(), toy_corpus(5000), small_cfg(QuantMode::int8), dir.path);
    auto cache = std::make_shared<const ActivationCache>(dir.path);
    ChunkStream p(cache, 0, 1, ReadMode::partition), b(cache, 0, 1, ReadMode::broadcast);
    while (true) {
        auto x = p.next();
        auto y = b.next();
        ASSERT_EQ(x.has_value(), y.has_value());
        if (!x) break;
        EXPECT_EQ(x->tokens, y->tokens);
        EXPECT_EQ(x->inputs, y->inputs);
        EXPECT_EQ(x->outputs, y->outputs);
    }
}

TEST(CacheRead, RoundRobinAssignment) {
    EXPECT_EQ(assigned_chunks(10, 0, 4, ReadMode::partition), (std::vector<std::uint64_t>{0, 4, 8}));
    EXPECT_EQ(assigned_chunks(10, 3, 4, ReadMode::partition), (std::vector<std::uint64_t>{3, 7}));
    EXPECT_EQ(assigned_chunks(3, 2, 4, ReadMode::broadcast), (std::vector<std::uint64_t>{0, 1, 2}));
    EXPECT_THROW(assigned_chunks(10, 4, 4, ReadMode::partition), InputError);
}

TEST(CacheRead, PartitionCoversEveryTokenOnce) {
    TempDir dir("cover");
    const auto corpus = toy_corpus(10000, 8);
    write_cache(toy_host(), corpus, small_cfg(QuantMode::int8), dir.path);
    auto cache = std::make_shared<const ActivationCache>(dir.path);
    std::multiset<std::uint64_t> chunks;
    std::map<TokenId, std::size_t> hist, ref;
    for (const auto& s : corpus)
        for (auto t : s) ++ref[t];
    for (std::size_t w = 0; w < 4; ++w) {
        ChunkStream s(cache, w, 4, ReadMode::partition);
        while (auto b = s.next()) {
            chunks.insert(b->chunk_index);
            for (auto t : b->tokens) ++hist[t];
        }
    }
    EXPECT_EQ(chunks.size(), 10u);
    EXPECT_EQ(std::set<std::uint64_t>(chunks.begin(), chunks.end()).size(), 10u);
    EXPECT_EQ(hist, ref);
}

TEST(CacheRead, StreamIsDeterministic) {
    TempDir dir("stream");
    write_cache(toy_host(), toy_corpus(5000), small_cfg(QuantMode::int2), dir.path);
    auto cache = std::make_shared<const ActivationCache>(dir.path);
    ChunkStream a(cache, 1, 2, ReadMode::partition);
    ChunkStream b(cache, 1, 2, ReadMode::partition);
    while (auto x = a.next()) {
        auto y = b.next();
        ASSERT_TRUE(y);
        EXPECT_EQ(x->inputs, y->inputs);
    }
    a.reset();
    EXPECT_EQ(a.next()->chunk_index, 1u);
}

TEST(CacheRead, CorruptChunkNamesChunkAndOthersSurvive) {
    TempDir dir("corrupt");
    write_cache(toy_host(), toy_corpus(5000), small_cfg(QuantMode::int8), dir.path);
    Bytes bytes = read_file(chunk_path(dir.path, 2));
    bytes[bytes.size() - 10] ^= 0x5a;
    write_file_atomic(chunk_path(dir.path, 2), bytes);
    fs::remove(chunk_path(dir.path, 4));
    const ActivationCache cache(dir.path);
    try {
        cache.read_chunk(2);
        FAIL() << "expected an integrity error";
    } catch (const IntegrityError& e) {
        EXPECT_NE(std::string(e.what()).find("chunk 2"), std::string::npos);
    }
    EXPECT_THROW(cache.read_chunk(4), IntegrityError);
    for (std::uint64_t i : {0, 1, 3}) EXPECT_NO_THROW(cache.read_chunk(i));

    Bytes trunc = read_file(chunk_path(dir.path, 1));
    trunc.resize(trunc.size() - 3);
    write_file_atomic(chunk_path(dir.path, 1), trunc);
    EXPECT_THROW(cache.read_chunk(1), IntegrityError);
}

TEST(CacheQuality, ModesOrderedAndFp16NearLossless) {
    const auto host = toy_host();
    const auto corpus = toy_corpus(5000);
    std::vector<CapturedActivations> ref;
    for (const auto& s : corpus) ref.push_back(forward_with_capture(host, s));
    std::map<QuantMode, double> q;
    for (auto mode : {QuantMode::fp16, QuantMode::int8, QuantMode::int4, QuantMode::int2}) {
        TempDir dir("quality_" + quant_mode_name(mode));
        write_cache(host, corpus, small_cfg(mode), dir.path);
        const auto rep = reconstruction_quality(ActivationCache(dir.path), ref);
        EXPECT_EQ(rep.input_quality.size(), 2u);
        q[mode] = rep.overall;
    }
    EXPECT_GE(q[QuantMode::fp16], 0.999);
    EXPECT_GE(q[QuantMode::int8], 0.97);
    EXPECT_LT(q[QuantMode::int2], q[QuantMode::int4]);
    EXPECT_LT(q[QuantMode::int4], q[QuantMode::int8]);
}

TEST(OnTheFly, MatchesCaptureAndCarriesPositions) {
    const auto host = toy_host();
    const auto corpus = toy_corpus(200);
    NormFactors norms{{2.0f, 2.0f}, {4.0f, 4.0f}};
    OnTheFlySource src(host, corpus, norms, 3);
    auto b = src.next();
    ASSERT_TRUE(b);
    EXPECT_EQ(b->size(), 75u);
    const auto cap = forward_with_capture(host, corpus[1]);
    EXPECT_EQ(b->sequence_ids[25], 1u);
    EXPECT_EQ(b->positions[26], 1u);
    EXPECT_EQ(b->outputs[1](26, 3), cap.mlp_out[1](1, 3) / 4.0f);
    std::size_t batches = 1;
    while (src.next()) ++batches;
    EXPECT_EQ(batches, 3u);
}
