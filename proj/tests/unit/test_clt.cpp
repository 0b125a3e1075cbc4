// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cltforge/clt.hpp"
#include "cltforge/error.hpp"

using namespace cltforge;

namespace {

CltModel random_clt(std::size_t L, std::size_t d, std::size_t e, std::uint64_t seed) {
    Rng rng(seed);
    CltModel m = CltModel::random({L, d, e}, rng);
    for (auto& b : m.b_enc)
        for (auto& v : b) v = static_cast<float>(rng.normal() * 0.05);
    for (auto& b : m.b_dec)
        for (auto& v : b) v = static_cast<float>(rng.normal() * 0.1);
    // Spread thresholds so some features fire and some do not.
    for (auto& t : m.log_threshold)
        for (auto& v : t) v = static_cast<float>(std::log(0.01 + 0.05 * rng.uniform()));
    return m;
}

std::vector<Tensor2> random_inputs(std::size_t L, std::size_t n, std::size_t d, std::uint64_t seed, float scale = 1.0f) {
    Rng rng(seed);
    std::vector<Tensor2> x;
    for (std::size_t l = 0; l < L; ++l) {
        Tensor2 t(n, d);
        fill_normal(t, rng, scale);
        x.push_back(std::move(t));
    }
    return x;
}

}  // namespace

TEST(CltEncode, ZeroInputZeroBias) {
    const CltModel m = random_clt(2, 4, 2, 1);
    CltModel z = m;
    for (auto& b : z.b_enc) std::fill(b.begin(), b.end(), 0.0f);
    const auto out = encode(z, std::vector<Tensor2>(2, Tensor2(3, 4)));
    for (const auto& t : out)
        for (float v : t.storage()) EXPECT_EQ(v, 0.0f);
}

TEST(CltEncode, ScalarThresholdSemantics) {
    CltModel m = CltModel::zeros({1, 1, 1});
    m.w_enc[0](0, 0) = 1.0f;
    EXPECT_EQ(encode_one(m, 0, std::vector<float>{0.02f})[0], 0.0f);
    EXPECT_EQ(encode_one(m, 0, std::vector<float>{0.05f})[0], 0.05f);
    EXPECT_NEAR(m.thresholds(0)[0], 0.03f, 1e-7f);
}

TEST(CltEncode, MatchesDirectFormula) {
    const CltModel m = random_clt(2, 6, 3, 2);
    const auto x = random_inputs(2, 5, 6, 3, 0.2f);
    const auto z = encode(m, x);
    std::size_t fired = 0;
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t f = 0; f < 18; ++f) {
                double pre = m.b_enc[l][f];
                for (std::size_t k = 0; k < 6; ++k) pre += double(m.w_enc[l](f, k)) * x[l](i, k);
                const double theta = std::exp(double(m.log_threshold[l][f]));
                const double expect = pre > theta ? pre : 0.0;
                EXPECT_NEAR(z[l](i, f), expect, 1e-6);
                fired += z[l](i, f) != 0.0f;
            }
    EXPECT_GT(fired, 0u);
}

TEST(CltEncode, ActiveFeaturesEqualPreActivationAboveThreshold) {
    const CltModel m = random_clt(3, 8, 4, 4);
    const auto x = random_inputs(3, 20, 8, 5, 0.3f);
    for (std::size_t l = 0; l < 3; ++l) {
        const Tensor2 pre = pre_activations(m, l, x[l], m.all_features());
        const Tensor2 z = jump_relu(m, l, pre, m.all_features());
        const auto th = m.thresholds(l);
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t f = 0; f < z.cols(); ++f)
                if (z(i, f) != 0.0f) {
                    EXPECT_EQ(z(i, f), pre(i, f));
                    EXPECT_GT(pre(i, f), th[f]);
                } else {
                    EXPECT_LE(pre(i, f), th[f]);
                }
    }
}

TEST(CltEncode, ShapeErrors) {
    const CltModel m = random_clt(2, 4, 2, 1);
    EXPECT_THROW(encode(m, std::vector<Tensor2>(2, Tensor2(3, 5))), ShapeError);
    EXPECT_THROW(encode(m, std::vector<Tensor2>(1, Tensor2(3, 4))), ShapeError);
    EXPECT_THROW(pre_activations(m, 0, Tensor2(1, 4), FeatureRange{0, 9}), ShapeError);
}

TEST(CltDecode, ZeroActivationsGiveBias) {
    const CltModel m = random_clt(3, 4, 2, 6);
    const std::vector<Tensor2> z(3, Tensor2(2, 8));
    for (std::size_t t = 0; t < 3; ++t) {
        const Tensor2 y = decode_cross_layer(m, z, t);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y(i, c), m.b_dec[t][c]);
    }
    EXPECT_THROW(decode_cross_layer(m, z, 3), ShapeError);
}

TEST(CltDecode, SingleLayerEqualsStandard) {
    const CltModel m = random_clt(1, 5, 3, 7);
    const auto z = encode(m, random_inputs(1, 4, 5, 8, 0.3f));
    EXPECT_EQ(decode_cross_layer(m, z, 0), decode_standard(m, z, 0));
}

TEST(CltDecode, ThreeLayersMatchExplicitSum) {
    const CltModel m = random_clt(3, 4, 2, 9);
    Rng rng(10);
    std::vector<Tensor2> z;
    for (int l = 0; l < 3; ++l) {
        Tensor2 t(3, 8);
        for (float& v : t.storage()) v = rng.uniform() < 0.5 ? 0.0f : static_cast<float>(rng.uniform());
        z.push_back(t);
    }
    const Tensor2 y = decode_cross_layer(m, z, 2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            double acc = m.b_dec[2][c];
            for (std::size_t s = 0; s < 3; ++s)
                for (std::size_t f = 0; f < 8; ++f) acc += double(m.decoder(s, 2)(c, f)) * z[s](i, f);
            EXPECT_NEAR(y(i, c), acc, 1e-5);
        }
}

TEST(CltDecode, ZeroCrossLayerDecodersReduceToStandard) {
    CltModel m = random_clt(3, 4, 2, 11);
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t t = s + 1; t < 3; ++t) m.decoder(s, t).fill(0.0f);
    const auto z = encode(m, random_inputs(3, 6, 4, 12, 0.3f));
    for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(decode_cross_layer(m, z, t), decode_standard(m, z, t));
}

TEST(CltDecode, StandardMatchesOracle) {
    const CltModel m = random_clt(2, 4, 2, 13);
    const auto z = encode(m, random_inputs(2, 5, 4, 14, 0.3f));
    const Tensor2 y = decode_standard(m, z, 1);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            double acc = m.b_dec[1][c];
            for (std::size_t f = 0; f < 8; ++f) acc += double(m.decoder(1, 1)(c, f)) * z[1](i, f);
            EXPECT_NEAR(y(i, c), acc, 1e-5);
        }
}

TEST(ParamCount, PaperFigure) {
    EXPECT_EQ(param_count({16, 2048, 48}, false), 27'380'416'512ull);
}

TEST(ParamCount, SmallCases) {
    EXPECT_EQ(param_count({1, 7, 3}, false), 3u * 49u);
    EXPECT_EQ(param_count({2, 4, 2}, false), 96u);
    EXPECT_EQ(param_count({2, 4, 2}, true), 160u);
}

TEST(ParamCount, MatchesEnumerationForAllDepths) {
    for (std::size_t L = 1; L <= 64; ++L) {
        const CltShape s{L, 3, 2};
        std::uint64_t pairs = 0;
        for (std::size_t a = 0; a < L; ++a)
            for (std::size_t b = a; b < L; ++b) ++pairs;
        EXPECT_EQ(param_count(s, false), pairs * 2 * 9);
        EXPECT_EQ(param_count(s, true), (pairs + L) * 2 * 9);
    }
    // The model allocates exactly the counted decoder entries.
    const CltModel m = CltModel::zeros({4, 3, 2});
    std::uint64_t dec = 0;
    for (const auto& w : m.w_dec) dec += w.size();
    EXPECT_EQ(dec, param_count(m.shape, false));
}

TEST(DecoderIndex, EnumeratesUpperTriangle) {
    std::size_t k = 0;
    for (std::size_t s = 0; s < 5; ++s)
        for (std::size_t t = s; t < 5; ++t) EXPECT_EQ(decoder_index(5, s, t), k++);
    EXPECT_THROW(decoder_index(5, 3, 2), ShapeError);
}

TEST(DecoderNorms, ZeroAndSingleEntry) {
    CltModel m = CltModel::zeros({2, 3, 1});
    for (const auto& l : decoder_norms(m))
        for (float v : l) EXPECT_EQ(v, 0.0f);
    m.decoder(0, 1)(2, 1) = -1.5f;
    const auto n = decoder_norms(m);
    EXPECT_EQ(n[0][1], 1.5f);
    EXPECT_EQ(n[1][1], 0.0f);
}

TEST(DecoderNorms, MatchConcatenatedColumns) {
    const CltModel m = random_clt(2, 4, 2, 15);
    const auto n = decoder_norms(m);
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t f = 0; f < 8; ++f) {
            std::vector<double> cat;
            for (std::size_t t = s; t < 2; ++t)
                for (std::size_t c = 0; c < 4; ++c) cat.push_back(m.decoder(s, t)(c, f));
            double sq = 0;
            for (double v : cat) sq += v * v;
            EXPECT_NEAR(n[s][f], std::sqrt(sq), 1e-6);
        }
}

TEST(Adapter, RankZeroIsBitwiseTransparent) {
    CltModel m = random_clt(2, 4, 2, 16);
    const auto z = encode(m, random_inputs(2, 3, 4, 17, 0.3f));
    const Tensor2 before = decode_cross_layer(m, z, 1);
    Rng rng(1);
    attach_adapter(m, 0, rng);
    EXPECT_EQ(decode_cross_layer(m, z, 1), before);
}

TEST(Adapter, ZeroInitBLeavesOutputsUnchanged) {
    CltModel m = random_clt(2, 4, 2, 18);
    const auto z = encode(m, random_inputs(2, 3, 4, 19, 0.3f));
    const Tensor2 before = decode_cross_layer(m, z, 1);
    Rng rng(2);
    attach_adapter(m, 3, rng);
    const Tensor2 after = decode_cross_layer(m, z, 1);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after.data()[i], before.data()[i], 1e-7);
    EXPECT_THROW(attach_adapter(m, 3, rng), StateError);
}

TEST(Adapter, MergeMatchesAdaptedForwardAndIsIdempotent) {
    CltModel m = random_clt(2, 4, 2, 20);
    Rng rng(3);
    attach_adapter(m, 2, rng, 0.1f);
    for (auto& b : m.adapter->b) fill_normal(b, rng, 0.1f);
    const auto z = encode(m, random_inputs(2, 5, 4, 21, 0.3f));
    const Tensor2 adapted = decode_cross_layer(m, z, 1);
    merge_adapter(m);
    EXPECT_FALSE(m.adapter.has_value());
    const Tensor2 merged = decode_cross_layer(m, z, 1);
    for (std::size_t i = 0; i < adapted.size(); ++i) EXPECT_NEAR(merged.data()[i], adapted.data()[i], 1e-6);
    const CltModel once = m;
    merge_adapter(m);
    EXPECT_EQ(m, once);
}

TEST(CltCheckpoint, RoundTripWithAdapter) {
    CltModel m = random_clt(3, 4, 2, 22);
    m.input_norm = {1.5f, 2.0f, 2.5f};
    const auto path = std::filesystem::temp_directory_path() / "cltforge_clt_roundtrip.clt";
    save_clt(m, path);
    EXPECT_EQ(load_clt(path), m);
    Rng rng(4);
    attach_adapter(m, 2, rng);
    save_clt(m, path);
    EXPECT_EQ(load_clt(path), m);
    Bytes b = serialize_clt(m);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 7), "CLTF-CL");
    b.pop_back();
    EXPECT_THROW(deserialize_clt(b), IntegrityError);
    std::filesystem::remove(path);
}
