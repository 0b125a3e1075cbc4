// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. A text file of `key = value` lines whose keys are the
// training-runner and autointerp keyword names, plus toolkit keys for the toy
// host, cache, attribution and service. Values follow Python literal syntax:
// True/False, None, 1_000 style integers, quoted or bare strings, lists.
// A trailing comma and `#` comments are ignored, and `"key": value` lines are
// read like `key = value`, so a pasted keyword-argument block or dict body
// parses as is.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cltforge {

struct RunConfig {
    // System
    std::string distributed_setup = "feature_sharding";
    std::string device = "cpu";
    std::string dtype = "float32";
    std::int64_t seed = 42;

    // Checkpointing
    std::int64_t n_checkpoints = 0;
    std::string checkpoint_path = "checkpoints";
    std::optional<std::string> from_pretrained_path;

    // Model and data
    std::string model_name = "toy-host";
    std::string dataset_path = "synthetic";
    std::int64_t context_size = 32;
    std::int64_t d_in = 16;
    std::int64_t expansion_factor = 8;
    std::string cached_activations_path = "cache";

    // JumpReLU
    double jumprelu_init_threshold = 0.03;
    double jumprelu_bandwidth = 1.0;

    // Batching
    std::int64_t train_batch_size_tokens = 1024;
    std::int64_t gradient_accumulation_steps = 4;
    std::int64_t n_train_batch_per_buffer = 8;

    // Training duration
    std::int64_t total_training_tokens = 4'096'000;

    // Optimization
    double lr = 4e-4;
    std::int64_t lr_warm_up_steps = 1000;
    std::int64_t lr_decay_steps = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;

    // Sparsity
    double l0_coefficient = 2.0;
    std::int64_t l0_warm_up_steps = 0;
    double dead_penalty_coef = 1e-5;
    std::int64_t dead_feature_window = 250;

    // Checkpoint selection
    std::vector<double> checkpoint_l0;
    std::optional<double> optimal_l0;

    // Logging (accepted for compatibility; metrics go to the workspace log)
    bool log_to_wandb = false;
    std::string wandb_project = "";
    std::optional<std::string> wandb_id;
    std::int64_t wandb_log_frequency = 10;
    std::int64_t eval_every_n_wandb_logs = 100;
    std::optional<std::string> run_name;

    // Autointerp
    std::string clt_path = "checkpoints/clt_final.clt";
    std::string latent_cache_path = "features";
    std::int64_t total_autointerp_tokens = 1'000'000;
    std::int64_t autointerp_top_k = 20;
    std::int64_t autointerp_window_before = 8;
    std::int64_t autointerp_window_after = 4;
    std::optional<std::string> explainer_url;

    // Toy host and corpus
    std::int64_t n_layers = 2;
    std::int64_t d_mlp = 64;
    std::int64_t vocab_size = 64;
    std::int64_t corpus_sequences = 4096;
    std::int64_t host_train_steps = 300;
    std::int64_t host_train_sequences = 1024;

    // Cache
    std::string quant_mode = "int8";
    std::string codec = "zstd";
    std::int64_t codec_level = 3;
    std::int64_t tokens_per_chunk = 1024;
    std::int64_t norm_batches = 4;
    std::int64_t norm_batch_tokens = 4096;

    // Attribution
    std::string prompt = "the cat sat on the mat and the cat";
    double node_mass = 0.8;
    double edge_mass = 0.98;
    std::int64_t max_logits = 5;
    std::string jacobian_path = "direct";

    // Finetuning
    std::int64_t finetune_rank = 4;
    std::int64_t finetune_steps = 200;
    double finetune_lr = 1e-3;

    // Workers and service
    std::int64_t num_workers = 1;
    std::string serve_host = "127.0.0.1";
    std::int64_t serve_port = 8080;
    std::optional<std::string> static_dir;

    /// Optimizer steps implied by the token budget.
    std::size_t total_training_steps() const;

    /// Throws ConfigError naming the first out-of-range key.
    void validate() const;

    bool operator==(const RunConfig&) const = default;
};

/// Every accepted key, in file order.
std::vector<std::string> config_keys();

/// Empty text gives the defaults. Unknown keys, duplicates, malformed values
/// and type mismatches raise ConfigError with the line number.
RunConfig parse_config_text(std::string_view text, const std::string& source = "<config>");
RunConfig parse_config(const std::filesystem::path& path);

/// Sets one key from its text form (as on a command line).
void set_config_value(RunConfig& cfg, const std::string& key, std::string_view value);

/// Every key, one per line; parse_config_text(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& cfg);

}  // namespace cltforge
