// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cltforge/error.hpp"
#include "cltforge/trainer.hpp"
#include "support/clt_oracle.hpp"
#include "support/gradcheck.hpp"

using namespace cltforge;
namespace fs = std::filesystem;

namespace {

// Targets generated by a hidden sparse CLT-like map so training has signal.
std::shared_ptr<std::vector<ActivationBatch>> synthetic_batches(std::size_t L, std::size_t d, std::size_t batches,
                                                                std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor2 mix(d, d);
    fill_normal(mix, rng, 1.0f / std::sqrt(float(d)));
    auto out = std::make_shared<std::vector<ActivationBatch>>();
    for (std::size_t b = 0; b < batches; ++b) {
        ActivationBatch batch;
        batch.chunk_index = b;
        for (std::size_t i = 0; i < n; ++i) batch.tokens.push_back(static_cast<TokenId>(rng.below(64)));
        for (std::size_t l = 0; l < L; ++l) {
            Tensor2 h(n, d), m(n, d);
            for (std::size_t i = 0; i < n; ++i) {
                // A few active directions per token.
                for (int k = 0; k < 2; ++k) h(i, rng.below(d)) += static_cast<float>(0.5 + rng.uniform());
                for (std::size_t c = 0; c < d; ++c) {
                    float acc = 0.0f;
                    for (std::size_t k = 0; k < d; ++k) acc += mix(c, k) * std::max(0.0f, h(i, k) - 0.2f);
                    m(i, c) = acc;
                }
            }
            batch.inputs.push_back(h);
            batch.outputs.push_back(m);
        }
        out->push_back(std::move(batch));
    }
    return out;
}

TrainConfig short_config(std::size_t steps) {
    TrainConfig cfg;
    cfg.schedule.total_steps = steps;
    cfg.schedule.lr = 3e-3f;
    cfg.schedule.lr_warm_up_steps = 10;
    cfg.schedule.lr_decay_steps = steps / 10;
    cfg.loss.l0_coefficient = 0.01f;
    cfg.loss.l0_warm_up_steps = steps / 2;
    cfg.loss.dead_feature_window = 20;
    cfg.batch_tokens = 64;
    cfg.gradient_accumulation_steps = 2;
    cfg.shuffle_buffer_tokens = 256;
    cfg.seed = 3;
    return cfg;
}

CltModel init_clt(std::size_t L, std::size_t d, std::size_t e, std::uint64_t seed) {
    Rng rng(seed);
    return CltModel::random({L, d, e}, rng);
}

ActivationBatch single_batch(std::size_t L, std::size_t d, std::size_t n, std::uint64_t seed) {
    return (*synthetic_batches(L, d, 1, n, seed))[0];
}

}  // namespace

TEST(Loss, PerfectReconstructionIsZero) {
    CltModel m = CltModel::zeros({2, 4, 2});
    ActivationBatch b;
    b.tokens.assign(3, 0);
    for (std::size_t l = 0; l < 2; ++l) {
        Tensor2 h(3, 4), out(3, 4);
        for (std::size_t c = 0; c < 4; ++c) {
            m.b_dec[l][c] = 0.1f * float(c + l);
            for (std::size_t i = 0; i < 3; ++i) out(i, c) = m.b_dec[l][c];
        }
        b.inputs.push_back(h);
        b.outputs.push_back(out);
    }
    LossConfig cfg;
    const auto t = compute_loss(m, b, cfg, 2.0f);
    EXPECT_EQ(t.total(), 0.0);
}

TEST(Loss, NoRegularizersEqualsSquaredErrorOracle) {
    const CltModel m = init_clt(2, 6, 2, 5);
    const ActivationBatch b = single_batch(2, 6, 9, 6);
    LossConfig cfg;
    cfg.dead_penalty_coef = 0.0f;
    const auto t = compute_loss(m, b, cfg, 0.0f);
    double recon = 0;
    const double o = oracle::loss(oracle::params_of(m), b, {}, &recon);
    EXPECT_NEAR(t.total(), o, 1e-6 * std::max(1.0, o));
    EXPECT_NEAR(t.reconstruction, recon, 1e-6 * std::max(1.0, recon));
    EXPECT_EQ(t.sparsity, 0.0);
}

TEST(Loss, DeadTermHandArithmetic) {
    CltModel m = CltModel::zeros({1, 1, 1});
    m.decoder(0, 0)(0, 0) = 2.0f;
    ActivationBatch b;
    b.tokens = {0};
    b.inputs.emplace_back(1, 1);
    b.outputs.emplace_back(1, 1);
    LossConfig cfg;
    cfg.dead_penalty_coef = 1e-5f;
    const auto t = compute_loss(m, b, cfg, 0.0f, DeadMask{{1}});
    EXPECT_NEAR(t.dead, 6e-7, 1e-12);
    EXPECT_EQ(compute_loss(m, b, cfg, 0.0f).dead, 0.0);
}

TEST(Loss, FullLossMatchesOracle) {
    auto c = oracle::make_gradcheck_case(2, 6, 2, 7);
    oracle::OracleLossConfig o;
    o.lambda0 = c.lambda0;
    o.lambda1 = c.cfg.dead_penalty_coef;
    o.C = c.cfg.tanh_scale;
    for (const auto& l : c.dead) o.dead.emplace_back(l.begin(), l.end());
    const double expect = oracle::loss(oracle::params_of(c.clt), c.batch, o);
    const auto t = compute_loss(c.clt, c.batch, c.cfg, c.lambda0, c.dead);
    EXPECT_NEAR(t.total(), expect, 1e-5 * expect);
    EXPECT_GT(t.sparsity, 0.0);
    EXPECT_GT(t.dead, 0.0);
}

TEST(Gradients, MatchFiniteDifferencesPerClass) {
    const auto c = oracle::make_gradcheck_case(2, 8, 2, 6);
    const auto rep = oracle::run_gradcheck(c);
    ASSERT_EQ(rep.rel_error.size(), 5u);
    for (const auto& [cls, err] : rep.rel_error) {
        EXPECT_GT(rep.fd_norm.at(cls), 0.0) << cls;
        EXPECT_LE(err, 1e-3) << cls;
    }
}

TEST(Gradients, StationaryAtPerfectReconstruction) {
    CltModel m = init_clt(2, 4, 2, 8);
    ActivationBatch b = single_batch(2, 4, 5, 9);
    // Targets equal the model's own reconstruction.
    const auto z = encode(m, b.inputs);
    for (std::size_t t = 0; t < 2; ++t) b.outputs[t] = decode_cross_layer(m, z, t);
    LossConfig cfg;
    cfg.dead_penalty_coef = 0.0f;
    CltModel g;
    loss_and_gradients(m, b, cfg, 0.0f, {}, g);
    double sq = 0;
    g.for_each_param([&](std::span<float> s) {
        for (float v : s) sq += double(v) * v;
    });
    EXPECT_LE(std::sqrt(sq), 1e-6);
}

TEST(Gradients, ThresholdGradientNeedsWindowSupport) {
    CltModel m = init_clt(2, 4, 2, 10);
    m.bandwidth = 1e-7f;
    const ActivationBatch b = single_batch(2, 4, 5, 11);
    LossConfig cfg;
    CltModel g;
    loss_and_gradients(m, b, cfg, 1.0f, {}, g);
    for (const auto& t : g.log_threshold)
        for (float v : t) EXPECT_EQ(v, 0.0f);
    // A wide window gives nonzero threshold gradients.
    m.bandwidth = 10.0f;
    loss_and_gradients(m, b, cfg, 1.0f, {}, g);
    double s = 0;
    for (const auto& t : g.log_threshold)
        for (float v : t) s += std::fabs(v);
    EXPECT_GT(s, 0.0);
}

TEST(Gradients, AdapterGradientsFollowChainRule) {
    CltModel m = init_clt(2, 4, 2, 12);
    Rng rng(5);
    attach_adapter(m, 2, rng, 0.1f);
    for (auto& b : m.adapter->b) fill_normal(b, rng, 0.1f);
    const ActivationBatch batch = single_batch(2, 4, 6, 13);
    LossConfig cfg;
    cfg.l0_coefficient = 0.0f;
    CltModel g;
    loss_and_gradients(m, batch, cfg, 0.0f, {}, g);
    ASSERT_TRUE(g.adapter);
    // Finite differences of the loss with respect to one A and one B entry.
    for (int which = 0; which < 2; ++which) {
        CltModel p = m;
        float& x = which == 0 ? p.adapter->a[1](2, 1) : p.adapter->b[2](5, 0);
        const float keep = x;
        const float h = 1e-3f;
        x = keep + h;
        const double lp = compute_loss(p, batch, cfg, 0.0f).total();
        x = keep - h;
        const double lm = compute_loss(p, batch, cfg, 0.0f).total();
        const double fd = (lp - lm) / (2 * h);
        const double an = which == 0 ? g.adapter->a[1](2, 1) : g.adapter->b[2](5, 0);
        EXPECT_NEAR(an, fd, 2e-3 * std::max(1.0, std::fabs(fd)));
    }
}

TEST(Schedules, L0LinearWithPlateau) {
    LossConfig cfg;
    cfg.l0_coefficient = 2.0f;
    cfg.l0_warm_up_steps = 700;
    EXPECT_EQ(l0_schedule(0, cfg), 0.0f);
    EXPECT_EQ(l0_schedule(700, cfg), 2.0f);
    EXPECT_EQ(l0_schedule(350, cfg), 1.0f);
    EXPECT_EQ(l0_schedule(5000, cfg), 2.0f);
}

TEST(Schedules, LearningRateWarmupPlateauDecay) {
    ScheduleConfig cfg;
    cfg.lr = 4e-4f;
    cfg.lr_warm_up_steps = 1000;
    cfg.total_steps = 20000;
    cfg.lr_decay_steps = 20000 / 20;
    EXPECT_EQ(lr_schedule(0, cfg), 0.0f);
    EXPECT_FLOAT_EQ(lr_schedule(500, cfg), 2e-4f);
    EXPECT_EQ(lr_schedule(5000, cfg), 4e-4f);
    EXPECT_EQ(lr_schedule(19000, cfg), 4e-4f);
    EXPECT_FLOAT_EQ(lr_schedule(19500, cfg), 2e-4f);
    EXPECT_EQ(lr_schedule(20000, cfg), 0.0f);
}

TEST(ShardPlanTest, FeatureRangesPartition) {
    const auto p = ShardPlan::make(ShardMode::feature_sharding, 3, 10);
    ASSERT_EQ(p.ranges.size(), 3u);
    EXPECT_EQ(p.ranges[0], (FeatureRange{0, 4}));
    EXPECT_EQ(p.ranges[1], (FeatureRange{4, 7}));
    EXPECT_EQ(p.ranges[2], (FeatureRange{7, 10}));
    EXPECT_NO_THROW(p.validate(10));
    EXPECT_THROW(p.validate(11), ConfigError);
    const auto dp = ShardPlan::make(ShardMode::data_parallel, 2, 10);
    EXPECT_EQ(dp.ranges[1], (FeatureRange{0, 10}));
    EXPECT_EQ(parse_shard_mode("feature_sharding"), ShardMode::feature_sharding);
    EXPECT_THROW(parse_shard_mode("fsdp"), ConfigError);
}

TEST(Train, SingleWorkerModesAreBitwiseIdentical) {
    const auto data = synthetic_batches(2, 8, 6, 64, 20);
    const auto src = memory_source_factory(data);
    const auto cfg = short_config(40);
    const CltModel init = init_clt(2, 8, 2, 21);
    const auto fs = train(init, src, cfg, ShardPlan::make(ShardMode::feature_sharding, 1, 16));
    const auto dp = train(init, src, cfg, ShardPlan::make(ShardMode::data_parallel, 1, 16));
    EXPECT_EQ(fs.model, dp.model);
    for (std::size_t i = 0; i < fs.log.size(); ++i) EXPECT_EQ(fs.log[i].loss, dp.log[i].loss);
}

TEST(Train, FeatureShardingMatchesSingleWorker) {
    const auto data = synthetic_batches(2, 8, 6, 64, 22);
    const auto src = memory_source_factory(data);
    const auto cfg = short_config(150);
    const CltModel init = init_clt(2, 8, 4, 23);
    const auto ref = train(init, src, cfg, ShardPlan::make(ShardMode::feature_sharding, 1, 32));
    for (std::size_t W : {2u, 4u}) {
        const auto run = train(init, src, cfg, ShardPlan::make(ShardMode::feature_sharding, W, 32));
        for (std::size_t i = 0; i < ref.log.size(); ++i)
            ASSERT_NEAR(run.log[i].loss, ref.log[i].loss, 1e-5 * std::fabs(ref.log[i].loss)) << "W=" << W << " step " << i;
        float worst = 0.0f;
        std::vector<std::span<float>> a, b;
        const_cast<CltModel&>(ref.model).for_each_param([&](std::span<float> s) { a.push_back(s); });
        const_cast<CltModel&>(run.model).for_each_param([&](std::span<float> s) { b.push_back(s); });
        for (std::size_t k = 0; k < a.size(); ++k)
            for (std::size_t i = 0; i < a[k].size(); ++i) worst = std::max(worst, std::fabs(a[k][i] - b[k][i]));
        EXPECT_LE(worst, 1e-4f) << "W=" << W;
        // The reduction is exact, so the weights agree bitwise.
        EXPECT_EQ(run.model, ref.model) << "W=" << W;
    }
}

TEST(Train, DataParallelLearns) {
    const auto data = synthetic_batches(2, 8, 8, 64, 24);
    const auto cfg = short_config(150);
    const auto run = train(init_clt(2, 8, 2, 25), memory_source_factory(data), cfg,
                           ShardPlan::make(ShardMode::data_parallel, 2, 16));
    EXPECT_LT(run.log.back().reconstruction, run.log.front().reconstruction);
}

TEST(Train, MetricLogHasEverySeries) {
    const fs::path dir = fs::temp_directory_path() / "cltforge_train_metrics";
    fs::remove_all(dir);
    auto cfg = short_config(30);
    cfg.metrics_path = dir / "metrics.jsonl";
    cfg.checkpoint_dir = dir / "ckpt";
    cfg.checkpoint_l0 = {1e9};
    const auto run = train(init_clt(2, 8, 2, 26), memory_source_factory(synthetic_batches(2, 8, 4, 64, 27)), cfg,
                           ShardPlan::make(ShardMode::feature_sharding, 1, 16));
    std::ifstream in(cfg.metrics_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* key : {"step", "loss", "l0", "lambda0", "dead_features", "explained_variance", "lr"})
            EXPECT_TRUE(j.contains(key)) << key;
        EXPECT_EQ(j["l0"].size(), 2u);
        EXPECT_EQ(j["step"].get<std::size_t>(), lines + 1);
        EXPECT_FLOAT_EQ(j["lambda0"].get<float>(), l0_schedule(lines + 1, cfg.loss));
        ++lines;
    }
    EXPECT_EQ(lines, 30u);
    ASSERT_EQ(run.checkpoints.size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "ckpt" / "clt_final.clt"));
    EXPECT_EQ(load_clt(dir / "ckpt" / "clt_final.clt"), run.model);
    fs::remove_all(dir);
}

TEST(Train, DeadFeaturesCountedOnlyAfterWindow) {
    // Encoder pushed far below threshold: nothing ever fires.
    CltModel m = init_clt(2, 8, 2, 28);
    for (auto& b : m.b_enc) std::fill(b.begin(), b.end(), -100.0f);
    auto cfg = short_config(30);
    cfg.loss.dead_feature_window = 10;
    const auto run = train(m, memory_source_factory(synthetic_batches(2, 8, 2, 64, 29)), cfg,
                           ShardPlan::make(ShardMode::feature_sharding, 2, 16));
    for (const auto& s : run.log) EXPECT_EQ(s.dead_features, s.step >= 10 ? 32u : 0u) << s.step;
}

TEST(Train, HigherL0CoefficientGivesNoLargerL0) {
    const auto data = synthetic_batches(2, 8, 6, 64, 30);
    std::vector<double> l0;
    for (float coef : {0.0f, 0.05f, 0.5f}) {
        auto cfg = short_config(200);
        cfg.loss.l0_coefficient = coef;
        const auto run = train(init_clt(2, 8, 2, 31), memory_source_factory(data), cfg,
                               ShardPlan::make(ShardMode::feature_sharding, 1, 16));
        const auto m = measure_l0(run.model, *data);
        l0.push_back(m[0] + m[1]);
    }
    EXPECT_GE(l0[0], l0[1]);
    EXPECT_GE(l0[1], l0[2]);
    EXPECT_GT(l0[0], l0[2]);
}

TEST(Train, NonFiniteLossAborts) {
    auto data = synthetic_batches(2, 8, 2, 64, 32);
    (*data)[0].outputs[0](3, 2) = NAN;
    (*data)[1].outputs[0](3, 2) = NAN;
    EXPECT_THROW(train(init_clt(2, 8, 2, 33), memory_source_factory(data), short_config(5),
                       ShardPlan::make(ShardMode::feature_sharding, 1, 16)),
                 TrainingError);
}

TEST(Train, ShapeMismatchIsConfigError) {
    EXPECT_THROW(train(init_clt(2, 6, 2, 34), memory_source_factory(synthetic_batches(2, 8, 2, 64, 35)),
                       short_config(5), ShardPlan::make(ShardMode::feature_sharding, 1, 12)),
                 ConfigError);
}

TEST(Train, AdapterOnlyLeavesBaseWeights) {
    CltModel m = init_clt(2, 8, 2, 36);
    Rng rng(6);
    attach_adapter(m, 2, rng);
    auto cfg = short_config(30);
    cfg.adapter_only = true;
    const auto run = train(m, memory_source_factory(synthetic_batches(2, 8, 4, 64, 37)), cfg,
                           ShardPlan::make(ShardMode::data_parallel, 1, 16));
    EXPECT_EQ(run.model.w_enc, m.w_enc);
    EXPECT_EQ(run.model.w_dec, m.w_dec);
    EXPECT_NE(run.model.adapter->b, m.adapter->b);
}

TEST(Metrics, ExplainedVarianceEdgeCases) {
    CltModel m = CltModel::zeros({2, 4, 2});
    ActivationBatch b = single_batch(2, 4, 10, 38);
    // m̂ = b_dec = per-layer mean → EV 0.
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t c = 0; c < 4; ++c) {
            double s = 0;
            for (std::size_t i = 0; i < 10; ++i) s += b.outputs[l](i, c);
            m.b_dec[l][c] = static_cast<float>(s / 10);
        }
    const auto ev0 = explained_variance(m, std::span(&b, 1));
    EXPECT_NEAR(ev0.total, 0.0, 1e-5);
    // Targets equal to the reconstruction → EV 1.
    const CltModel r = init_clt(2, 4, 2, 39);
    const auto z = encode(r, b.inputs);
    for (std::size_t t = 0; t < 2; ++t) b.outputs[t] = decode_cross_layer(r, z, t);
    EXPECT_NEAR(explained_variance(r, std::span(&b, 1)).total, 1.0, 1e-9);
}

TEST(Metrics, ExplainedVarianceMatchesOracle) {
    const CltModel m = init_clt(2, 4, 2, 40);
    const ActivationBatch b = single_batch(2, 4, 12, 41);
    const auto ev = explained_variance(m, std::span(&b, 1));
    const auto z = encode(m, b.inputs);
    for (std::size_t t = 0; t < 2; ++t) {
        const Tensor2 y = decode_cross_layer(m, z, t);
        double err = 0, var = 0;
        for (std::size_t c = 0; c < 4; ++c) {
            double mean = 0;
            for (std::size_t i = 0; i < 12; ++i) mean += b.outputs[t](i, c) / 12.0;
            for (std::size_t i = 0; i < 12; ++i) {
                err += std::pow(y(i, c) - b.outputs[t](i, c), 2);
                var += std::pow(b.outputs[t](i, c) - mean, 2);
            }
        }
        EXPECT_NEAR(ev.per_layer[t], 1 - err / var, 1e-5);
    }
}

TEST(Metrics, L0Counts) {
    CltModel m = init_clt(2, 4, 2, 42);
    const ActivationBatch b = single_batch(2, 4, 7, 43);
    for (auto& bias : m.b_enc) std::fill(bias.begin(), bias.end(), -1e3f);
    for (double v : measure_l0(m, std::span(&b, 1))) EXPECT_EQ(v, 0.0);
    for (auto& bias : m.b_enc) std::fill(bias.begin(), bias.end(), 1e3f);
    for (double v : measure_l0(m, std::span(&b, 1))) EXPECT_EQ(v, 8.0);
    const CltModel r = init_clt(2, 4, 2, 44);
    const auto z = encode(r, b.inputs);
    const auto l0 = measure_l0(r, std::span(&b, 1));
    for (std::size_t l = 0; l < 2; ++l) {
        double count = 0;
        for (float v : z[l].storage()) count += v != 0.0f;
        EXPECT_DOUBLE_EQ(l0[l], count / 7.0);
    }
}
