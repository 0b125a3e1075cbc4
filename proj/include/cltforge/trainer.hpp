// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// CLT training. The per-token objective, averaged over the tokens of a
// batch, is
//
//   Σ_ℓ' ‖m̂_ℓ' − m_ℓ'‖²
//   + λ0(step) · Σ_ℓ Σ_i tanh(C · z_ℓ,i · ‖W_dec,ℓ,i‖)
//   + λ1 · Σ_ℓ Σ_{i dead} ReLU(exp(τ_ℓ,i) − pre_ℓ,i) · ‖W_dec,ℓ,i‖
//
// where ‖W_dec,ℓ,i‖ is the norm of feature i's decoder columns concatenated
// over its target layers, and a feature is dead once it has not fired for
// dead_feature_window optimizer steps.
//
// Workers are simulated in process. Feature sharding gives each worker a
// contiguous feature slice of the same batch; their partial reconstructions
// are summed in rank order before the loss. Data parallel gives each worker
// its own chunks and averages gradients in rank order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cltforge/activation_cache.hpp"
#include "cltforge/clt.hpp"

namespace cltforge {

struct LossConfig {
    float l0_coefficient = 2.0f;       ///< λ0 at the end of warm-up
    std::size_t l0_warm_up_steps = 0;  ///< linear ramp of λ0 from 0
    float dead_penalty_coef = 1e-5f;   ///< λ1
    float tanh_scale = 10.0f;          ///< C
    std::size_t dead_feature_window = 250;
};

struct LossTerms {
    double reconstruction = 0.0;
    double sparsity = 0.0;
    double dead = 0.0;
    double total() const noexcept { return reconstruction + sparsity + dead; }
};

/// Dead-feature flags per [layer][feature]; empty means none dead.
using DeadMask = std::vector<std::vector<std::uint8_t>>;

/// Loss of one batch (rows already normalized).
LossTerms compute_loss(const CltModel& clt, const ActivationBatch& batch, const LossConfig& cfg, float lambda0,
                       const DeadMask& dead = {});

/// Loss and analytic gradients. `grad` is overwritten and laid out like the
/// model; with an adapter attached, gradients with respect to A and B are
/// written into grad.adapter and the decoder slot holds the gradient of the
/// effective decoder. Threshold gradients use the rectangular-window
/// estimator −(θ/ε)·1[|pre − θ| < ε/2] for ∂z/∂θ.
LossTerms loss_and_gradients(const CltModel& clt, const ActivationBatch& batch, const LossConfig& cfg,
                             float lambda0, const DeadMask& dead, CltModel& grad);

struct ScheduleConfig {
    float lr = 4e-4f;
    std::size_t lr_warm_up_steps = 1000;
    std::size_t lr_decay_steps = 0;
    std::size_t total_steps = 1;
};

/// Linear ramp from 0 to l0_coefficient over the warm-up, constant after.
float l0_schedule(std::size_t step, const LossConfig& cfg);
/// Linear warm-up, plateau, then linear decay reaching 0 at total_steps.
float lr_schedule(std::size_t step, const ScheduleConfig& cfg);

enum class ShardMode { feature_sharding, data_parallel };

std::string shard_mode_name(ShardMode m);
ShardMode parse_shard_mode(const std::string& name);

struct ShardPlan {
    ShardMode mode = ShardMode::feature_sharding;
    std::size_t num_workers = 1;
    /// Feature sharding: contiguous, disjoint, covering. Data parallel: every
    /// worker holds the full range.
    std::vector<FeatureRange> ranges;

    static ShardPlan make(ShardMode mode, std::size_t num_workers, std::size_t d_features);
    void validate(std::size_t d_features) const;
};

struct TrainConfig {
    LossConfig loss;
    ScheduleConfig schedule;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    std::size_t batch_tokens = 1024;  ///< tokens per micro-batch
    std::size_t gradient_accumulation_steps = 4;
    std::size_t shuffle_buffer_tokens = 8192;
    std::uint64_t seed = 42;
    /// Save a checkpoint the first time mean per-layer L0 drops to each value.
    std::vector<double> checkpoint_l0;
    std::filesystem::path checkpoint_dir;  ///< empty: no checkpoints written
    std::filesystem::path metrics_path;    ///< empty: metrics only returned
    /// Train only the low-rank adapter (requires one attached).
    bool adapter_only = false;
};

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double reconstruction = 0.0;
    double sparsity = 0.0;
    double dead_term = 0.0;
    std::vector<double> l0;  // [layer] mean active features per token
    double lambda0 = 0.0;
    std::size_t dead_features = 0;
    double explained_variance = 0.0;
    std::vector<double> explained_variance_per_layer;
    double lr = 0.0;
};

std::string metrics_to_json(const StepMetrics& m);

struct TrainResult {
    CltModel model;
    std::vector<StepMetrics> log;
    std::vector<std::filesystem::path> checkpoints;
};

/// Builds the activation stream of one worker.
using SourceFactory = std::function<std::unique_ptr<ActivationSource>(std::size_t worker, std::size_t num_workers,
                                                                      ReadMode mode)>;

SourceFactory cache_source_factory(std::shared_ptr<const ActivationCache> cache);
SourceFactory memory_source_factory(std::shared_ptr<const std::vector<ActivationBatch>> batches);

/// Runs schedule.total_steps optimizer steps. Throws ConfigError on shape
/// mismatch and TrainingError on a non-finite loss.
TrainResult train(CltModel clt, const SourceFactory& sources, const TrainConfig& cfg, const ShardPlan& plan);

struct EvalReport {
    std::vector<double> per_layer;
    double total = 0.0;
};

/// 1 − ‖m̂ − m‖² / ‖m − mean(m)‖², per layer and pooled over layers.
EvalReport explained_variance(const CltModel& clt, std::span<const ActivationBatch> batches);
/// Mean number of active features per token, per layer.
std::vector<double> measure_l0(const CltModel& clt, std::span<const ActivationBatch> batches);

/// Pulls up to `max_batches` batches from a source (all when 0).
std::vector<ActivationBatch> collect_batches(ActivationSource& source, std::size_t max_batches = 0);

}  // namespace cltforge
