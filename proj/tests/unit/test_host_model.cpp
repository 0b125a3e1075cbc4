// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"
#include "cltforge/host_model.hpp"
#include "support/host_oracle.hpp"

using namespace cltforge;

namespace {

HostModel small_model(std::size_t d = 8, std::uint64_t seed = 1) {
    HostConfig cfg;
    cfg.num_layers = 2;
    cfg.d_model = d;
    cfg.d_mlp = 4 * d;
    cfg.vocab = 64;
    cfg.context = 16;
    Rng rng(seed);
    HostModel m = HostModel::random(cfg, rng);
    // Nonzero biases and gains so every term of the forward is exercised.
    for (auto& l : m.layers) {
        for (auto& v : l.b_in) v = static_cast<float>(rng.normal() * 0.1);
        for (auto& v : l.b_out) v = static_cast<float>(rng.normal() * 0.1);
        for (auto& v : l.ln1_gain) v = 1.0f + static_cast<float>(rng.normal() * 0.2);
        for (auto& v : l.ln2_gain) v = 1.0f + static_cast<float>(rng.normal() * 0.2);
    }
    fill_normal(m.embed, rng, 1.0f);
    fill_normal(m.pos_embed, rng, 0.5f);
    return m;
}

const TokenSequence kPrompt{3, 17, 5, 3, 17, 9};

std::vector<std::vector<double>> captured_outputs(const CapturedActivations& cap) {
    std::vector<std::vector<double>> out;
    for (const auto& m : cap.mlp_out) out.emplace_back(m.storage().begin(), m.storage().end());
    return out;
}

double rel_frobenius(const Tensor2& a, const Tensor2& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += std::pow(double(a.data()[i]) - b.data()[i], 2);
        den += std::pow(double(b.data()[i]), 2);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace

TEST(HostForward, SingleTokenHasOnePairPerLayer) {
    const HostModel m = small_model();
    const auto cap = forward_with_capture(m, TokenSequence{4});
    ASSERT_EQ(cap.mlp_in.size(), 2u);
    ASSERT_EQ(cap.mlp_out.size(), 2u);
    EXPECT_EQ(cap.mlp_in[0].rows(), 1u);
    EXPECT_EQ(cap.mlp_out[1].cols(), 8u);
    EXPECT_EQ(cap.logits.rows(), 1u);
    EXPECT_EQ(cap.logits.cols(), 64u);
}

TEST(HostForward, ZeroEmbeddingGivesPositionalInput) {
    HostConfig cfg;
    cfg.d_model = 8;
    cfg.d_mlp = 16;
    HostModel m = HostModel::zeros(cfg);
    Rng rng(3);
    fill_normal(m.pos_embed, rng, 1.0f);
    const auto cap = forward_with_capture(m, kPrompt);
    for (std::size_t k = 0; k < kPrompt.size(); ++k)
        for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(cap.mlp_in[0](k, i), m.pos_embed(k, i));
}

TEST(HostForward, MatchesIndependentForward) {
    const HostModel m = small_model(16, 5);
    const auto cap = forward_with_capture(m, kPrompt);
    const auto ref = oracle::host_forward(m, kPrompt);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < kPrompt.size(); ++k)
            for (std::size_t i = 0; i < 16; ++i) {
                EXPECT_NEAR(cap.mlp_in[l](k, i), ref.h[l][k][i], 1e-4 * (1 + std::fabs(ref.h[l][k][i])));
                EXPECT_NEAR(cap.mlp_out[l](k, i), ref.m[l][k][i], 1e-4 * (1 + std::fabs(ref.m[l][k][i])));
            }
    for (std::size_t k = 0; k < kPrompt.size(); ++k)
        for (std::size_t v = 0; v < 64; ++v) EXPECT_NEAR(cap.logits(k, v), ref.logits[k][v], 1e-4 * (1 + std::fabs(ref.logits[k][v])));
}

TEST(HostForward, RejectsOutOfRangeToken) {
    const HostModel m = small_model();
    EXPECT_THROW(forward_with_capture(m, TokenSequence{1, 64}), InputError);
    HostConfig one;
    one.num_layers = 1;
    EXPECT_THROW(HostModel::zeros(one), InputError);
}

TEST(HostForward, Deterministic) {
    const HostModel m = small_model();
    const auto a = forward_with_capture(m, kPrompt);
    const auto b = forward_with_capture(m, kPrompt);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.mlp_out, b.mlp_out);
}

TEST(Frozen, ReplayReproducesLogitsBitwise) {
    const HostModel m = small_model();
    CapturedActivations cap;
    const auto st = freeze(m, kPrompt, &cap);
    std::vector<std::vector<float>> outs;
    for (const auto& t : cap.mlp_out) outs.push_back(t.storage());
    const auto rep = frozen_replay<float>(m, st, outs);
    ASSERT_EQ(rep.logits.size(), cap.logits.size());
    for (std::size_t i = 0; i < rep.logits.size(); ++i) ASSERT_EQ(rep.logits[i], cap.logits.data()[i]);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t i = 0; i < rep.mlp_in[l].size(); ++i) ASSERT_EQ(rep.mlp_in[l][i], cap.mlp_in[l].data()[i]);
}

TEST(Frozen, ResponseIsLinear) {
    const HostModel m = small_model();
    const auto st = freeze(m, kPrompt);
    Rng rng(21);
    auto random_inj = [&](int layer, std::size_t pos, double s) {
        Injection inj{layer, pos, std::vector<double>(8)};
        for (auto& v : inj.vec) v = rng.normal() * s;
        return inj;
    };
    for (auto path : {JacobianPath::direct, JacobianPath::through_mlps}) {
        const Injection u = random_inj(0, 1, 1.0), v = random_inj(0, 3, 1.0);
        Injection half = u;
        for (auto& x : half.vec) x *= 0.5;
        const auto ru = frozen_response(m, st, std::span(&u, 1), path);
        const auto rh = frozen_response(m, st, std::span(&half, 1), path);
        const auto rv = frozen_response(m, st, std::span(&v, 1), path);
        const Injection both[2] = {u, v};
        const auto ruv = frozen_response(m, st, both, path);
        double scale = 0;
        for (double x : ru.logits) scale = std::max(scale, std::fabs(x));
        ASSERT_GT(scale, 0.0);
        for (std::size_t i = 0; i < ru.logits.size(); ++i) {
            EXPECT_NEAR(rh.logits[i], 0.5 * ru.logits[i], 1e-6 * scale);
            EXPECT_NEAR(ruv.logits[i], ru.logits[i] + rv.logits[i], 1e-6 * scale);
        }
    }
}

TEST(Frozen, PerturbationScalesLinearlyThroughReplay) {
    const HostModel m = small_model();
    CapturedActivations cap;
    const auto st = freeze(m, kPrompt, &cap);
    const auto base = captured_outputs(cap);
    const auto ref = frozen_replay<double>(m, st, base);
    auto delta_for = [&](double s) {
        auto outs = base;
        for (std::size_t i = 0; i < 8; ++i) outs[0][2 * 8 + i] += s * (i % 3 == 0 ? 1.0 : -0.5);
        const auto r = frozen_replay<double>(m, st, outs);
        std::vector<double> d(r.logits.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = r.logits[i] - ref.logits[i];
        return d;
    };
    const auto d1 = delta_for(0.2), d2 = delta_for(0.1);
    double scale = 0;
    for (double x : d1) scale = std::max(scale, std::fabs(x));
    ASSERT_GT(scale, 0.0);
    for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_NEAR(d2[i], 0.5 * d1[i], 1e-6 * scale);
}

TEST(Frozen, ResponseMatchesReplayDifference) {
    const HostModel m = small_model();
    CapturedActivations cap;
    const auto st = freeze(m, kPrompt, &cap);
    auto outs = captured_outputs(cap);
    const auto ref = frozen_replay<double>(m, st, outs);
    Injection inj{0, 2, std::vector<double>(8)};
    for (std::size_t i = 0; i < 8; ++i) inj.vec[i] = 0.1 * (double(i) - 3.5);
    for (std::size_t i = 0; i < 8; ++i) outs[0][2 * 8 + i] += inj.vec[i];
    const auto pert = frozen_replay<double>(m, st, outs);
    const auto resp = frozen_response(m, st, std::span(&inj, 1));
    for (std::size_t i = 0; i < ref.logits.size(); ++i)
        EXPECT_NEAR(resp.logits[i], pert.logits[i] - ref.logits[i], 1e-9);
    for (std::size_t i = 0; i < ref.mlp_in[1].size(); ++i)
        EXPECT_NEAR(resp.mlp_in[1][i], pert.mlp_in[1][i] - ref.mlp_in[1][i], 1e-9);
}

TEST(Frozen, CausalPositionsUntouched) {
    const HostModel m = small_model();
    const auto st = freeze(m, kPrompt);
    Injection inj{0, 3, std::vector<double>(8, 1.0)};
    for (auto path : {JacobianPath::direct, JacobianPath::through_mlps}) {
        const auto r = frozen_response(m, st, std::span(&inj, 1), path);
        for (std::size_t k = 0; k < 3; ++k) {
            for (std::size_t v = 0; v < 64; ++v) EXPECT_EQ(r.logits[k * 64 + v], 0.0);
            for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.mlp_in[1][k * 8 + i], 0.0);
        }
    }
}

TEST(FrozenJacobian, ResidualIdentityWhenAttentionZeroed) {
    HostModel m = small_model();
    for (auto& l : m.layers) l.wo.fill(0.0f);
    const auto st = freeze(m, kPrompt);
    const Tensor2 j = frozen_jacobian(m, st, {0, 2}, {1, 2});
    EXPECT_EQ(j, Tensor2::identity(8));
}

TEST(FrozenJacobian, MatchesFiniteDifferencesOnEveryPair) {
    const HostModel m = small_model();
    CapturedActivations cap;
    const auto st = freeze(m, kPrompt, &cap);
    const std::size_t T = kPrompt.size(), d = 8;
    std::vector<std::vector<float>> base;
    for (const auto& t : cap.mlp_out) base.push_back(t.storage());

    for (auto path : {JacobianPath::direct, JacobianPath::through_mlps}) {
        for (std::size_t k = 0; k < T; ++k)
            for (std::size_t k2 = k; k2 < T; ++k2) {
                // Frozen map from the MLP output at (0,k) to the MLP input at (1,k2).
                const VectorMap f = [&](std::span<const float> v) {
                    std::vector<float> res(d);
                    if (path == JacobianPath::direct) {
                        auto outs = base;
                        for (std::size_t i = 0; i < d; ++i) outs[0][k * d + i] = v[i];
                        const auto r = frozen_replay<float>(m, st, outs);
                        for (std::size_t i = 0; i < d; ++i) res[i] = r.mlp_in[1][k2 * d + i];
                    } else {
                        std::vector<std::vector<float>> off(2, std::vector<float>(T * d, 0.0f));
                        for (std::size_t i = 0; i < d; ++i) off[0][k * d + i] = v[i];
                        const auto r = frozen_replay_through_mlps<float>(m, st, off);
                        for (std::size_t i = 0; i < d; ++i) res[i] = r.mlp_in[1][k2 * d + i];
                    }
                    return res;
                };
                std::vector<float> x0(d, 0.0f);
                if (path == JacobianPath::direct)
                    for (std::size_t i = 0; i < d; ++i) x0[i] = base[0][k * d + i];
                // The frozen map is exactly linear, so a unit step keeps rounding noise small.
                const Tensor2 fd = finite_diff_jacobian(f, x0, 1.0f);
                const Tensor2 an = frozen_jacobian(m, st, {0, k}, {1, k2}, path);
                EXPECT_LE(rel_frobenius(an, fd), 1e-3) << "k=" << k << " k2=" << k2;
            }
    }
}

TEST(FrozenJacobian, OrderingErrors) {
    const HostModel m = small_model();
    const auto st = freeze(m, kPrompt);
    EXPECT_THROW(frozen_jacobian(m, st, {0, 3}, {1, 2}), OrderingError);
    EXPECT_THROW(frozen_jacobian(m, st, {1, 0}, {1, 2}), OrderingError);
    EXPECT_THROW(frozen_jacobian(m, st, {1, 0}, {0, 2}), OrderingError);
}

TEST(FrozenJacobian, LogitGradientMatchesFiniteDifferences) {
    const HostModel m = small_model();
    CapturedActivations cap;
    const auto st = freeze(m, kPrompt, &cap);
    const std::size_t T = kPrompt.size(), d = 8;
    std::vector<std::vector<float>> base;
    for (const auto& t : cap.mlp_out) base.push_back(t.storage());
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < T; ++k) {
            const std::size_t tok = 7;
            const VectorMap f = [&](std::span<const float> v) {
                auto outs = base;
                for (std::size_t i = 0; i < d; ++i) outs[l][k * d + i] = v[i];
                const auto r = frozen_replay<float>(m, st, outs);
                return std::vector<float>{r.logits[(T - 1) * 64 + tok]};
            };
            const Tensor2 fd = finite_diff_jacobian(f, std::span(base[l]).subspan(k * d, d), 1.0f);
            const auto g = jacobian_to_logit(m, st, {l, k}, tok);
            const Tensor2 an(1, d, g);
            EXPECT_LE(rel_frobenius(an, fd), 1e-3);
        }
}

TEST(HostTraining, ZeroStepsLeavesModelUnchanged) {
    const HostModel m = small_model();
    Rng rng(2);
    CorpusSpec spec;
    spec.num_sequences = 8;
    spec.seq_len = 12;
    const auto corpus = make_synthetic_corpus(rng, spec);
    HostTrainConfig tc;
    tc.steps = 0;
    EXPECT_EQ(train_host_model(m, corpus, tc).model, m);
}

TEST(HostTraining, GradientMatchesFiniteDifferences) {
    const HostModel m = small_model(8, 9);
    Rng rng(4);
    CorpusSpec spec;
    spec.num_sequences = 3;
    spec.seq_len = 7;
    const auto batch = make_synthetic_corpus(rng, spec);
    HostModel grad = HostModel::zeros(m.config);
    next_token_loss_and_grad(m, batch, grad);

    std::vector<std::span<float>> gspans;
    grad.for_each_param([&](std::span<float> g) { gspans.push_back(g); });
    HostModel probe = m;
    std::size_t pi = 0, failures = 0, checked = 0;
    probe.for_each_param([&](std::span<float> p) {
        const std::span<float> g = gspans[pi++];
        for (std::size_t j : {std::size_t{0}, p.size() / 2, p.size() - 1}) {
            const float keep = p[j];
            const double h = 1e-2;
            p[j] = keep + float(h);
            const double lp = next_token_loss(probe, batch);
            p[j] = keep - float(h);
            const double lm = next_token_loss(probe, batch);
            p[j] = keep;
            const double fd = (lp - lm) / (2 * h);
            ++checked;
            if (std::fabs(fd - g[j]) > 2e-3 + 2e-2 * std::fabs(fd)) ++failures;
        }
    });
    EXPECT_GT(checked, 30u);
    EXPECT_EQ(failures, 0u);
}

TEST(HostTraining, LossFallsBelowUnigramBaselineAndIsDeterministic) {
    HostConfig cfg;
    cfg.d_model = 16;
    cfg.d_mlp = 64;
    cfg.context = 32;
    Rng rng(12);
    const HostModel init = HostModel::random(cfg, rng);
    CorpusSpec spec;
    spec.num_sequences = 256;
    spec.seq_len = 32;
    Rng crng(13);
    const auto corpus = make_synthetic_corpus(crng, spec);
    HostTrainConfig tc;
    tc.steps = 500;
    tc.seed = 5;
    const auto a = train_host_model(init, corpus, tc);
    ASSERT_EQ(a.loss_history.size(), 500u);
    auto window_mean = [&](std::size_t b, std::size_t e) {
        double s = 0;
        for (std::size_t i = b; i < e; ++i) s += a.loss_history[i];
        return s / double(e - b);
    };
    // Smoothed loss trends down across consecutive 100-step windows.
    for (std::size_t w = 0; w + 1 < 5; ++w) EXPECT_GT(window_mean(w * 100, w * 100 + 100), window_mean(w * 100 + 100, w * 100 + 200));
    EXPECT_LT(next_token_loss(a.model, corpus), unigram_entropy(corpus, cfg.vocab));

    const auto b = train_host_model(init, corpus, tc);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.loss_history, b.loss_history);
}

TEST(HostCheckpoint, RoundTripsBitExactly) {
    const HostModel m = small_model();
    const auto path = std::filesystem::temp_directory_path() / "cltforge_host_roundtrip.bin";
    save_host_model(m, path);
    EXPECT_EQ(load_host_model(path), m);
    Bytes bytes = serialize_host_model(m);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 7), "CLTF-HM");
    bytes.resize(bytes.size() - 5);
    EXPECT_THROW(deserialize_host_model(bytes), IntegrityError);
    std::filesystem::remove(path);
}
