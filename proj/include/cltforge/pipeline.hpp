// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// One entry point per pipeline stage, each driving a single module from a
// RunConfig and a workspace. Missing inputs raise StateError naming the file
// and the stage that produces it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cltforge/activation_cache.hpp"
#include "cltforge/attribution.hpp"
#include "cltforge/autointerp.hpp"
#include "cltforge/config.hpp"
#include "cltforge/host_model.hpp"
#include "cltforge/trainer.hpp"
#include "cltforge/workspace.hpp"

namespace cltforge {

using Logger = std::function<void(std::string_view)>;

/// Deterministic synthetic corpus from seed, corpus_sequences, context_size and vocab_size.
std::vector<TokenSequence> build_corpus(const RunConfig& cfg);
HostConfig host_config(const RunConfig& cfg);

std::filesystem::path cache_dir(const RunConfig& cfg, const Workspace& ws);
std::filesystem::path host_model_path(const RunConfig& cfg, const Workspace& ws);
std::filesystem::path feature_store_path(const RunConfig& cfg, const Workspace& ws);

/// Throws StateError unless `path` exists.
void require_artifact(const std::filesystem::path& path, std::string_view producer);

struct CacheReport {
    CacheHeader header;
    std::filesystem::path dir;
    std::uint64_t stored_bytes = 0;
    double host_loss = 0.0;
};

/// Trains the toy host on the corpus head, then writes the activation cache.
CacheReport run_cache(const RunConfig& cfg, const Workspace& ws, const Logger& log = {});

struct TrainReport {
    std::size_t steps = 0;
    std::filesystem::path final_checkpoint;
    std::filesystem::path selected_checkpoint;
    std::vector<std::filesystem::path> checkpoints;
    std::filesystem::path metrics_path;
    std::filesystem::path summary_path;
    double explained_variance = 0.0;
    std::vector<double> l0;
};

/// CLT shape and init taken from the config; norms from the cache header.
TrainReport run_train(const RunConfig& cfg, const Workspace& ws, std::size_t num_workers, const Logger& log = {});

/// Low-rank adapter finetune of clt_path, merged and saved as clt_finetuned.clt.
TrainReport run_finetune(const RunConfig& cfg, const Workspace& ws, std::size_t num_workers, const Logger& log = {});

struct AutointerpReport {
    std::filesystem::path store_path;
    std::vector<std::filesystem::path> worker_stores;
    std::uint64_t tokens_scanned = 0;
    std::size_t records = 0;
};

AutointerpReport run_autointerp(const RunConfig& cfg, const Workspace& ws, std::size_t num_workers,
                                const Logger& log = {});

AttributionConfig attribution_config(const RunConfig& cfg);

struct AttributeReport {
    std::string graph_id;
    std::filesystem::path graph_path;  // pruned, served by default
    std::filesystem::path full_path;   // unpruned, used for re-pruning
    AttributionGraph pruned;
};

/// Graph ids are derived from the prompt and the CLT path.
std::string graph_id_for(const std::string& prompt, const std::string& clt_path);

AttributeReport run_attribute(const RunConfig& cfg, const Workspace& ws, const std::optional<std::string>& prompt = {},
                              const Logger& log = {});

}  // namespace cltforge
