// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-pass automated interpretability. Workers own disjoint slices of the
// (layer, feature) space, stream host activations on the fly, and keep for
// each feature only a bounded top-K of per-sequence peaks plus running
// summaries. Per-worker stores are merged into one file.
//
// Ordering of examples: higher activation first; equal activations are
// ordered by lower (sequence id, peak position).

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cltforge/clt.hpp"
#include "cltforge/host_model.hpp"

namespace cltforge {

struct AutointerpConfig {
    std::size_t top_k = 20;
    std::size_t window_before = 8;
    std::size_t window_after = 4;
    std::size_t total_tokens = 1'000'000;
    std::size_t num_workers = 1;
    std::size_t batch_tokens = 4096;
    std::size_t top_tokens = 10;  ///< tokens kept in each summary
    /// Values a feature's quantile sketch holds exactly before compacting.
    std::size_t quantile_capacity = 4096;

    void validate() const;
};

/// Identifies a scan: config (worker count excluded), CLT, host model and corpus.
std::uint64_t scan_hash(const AutointerpConfig& cfg, const CltModel& clt, const HostModel& model,
                        std::span<const TokenSequence> corpus);

struct FeatureKey {
    std::uint32_t layer = 0;
    std::uint32_t feature = 0;
    auto operator<=>(const FeatureKey&) const = default;
};

struct TopExample {
    float activation = 0.0f;
    std::uint32_t sequence_id = 0;
    std::uint32_t peak_position = 0;
    std::uint32_t window_start = 0;     ///< position of tokens[0] in the sequence
    std::vector<TokenId> tokens;        ///< context window around the peak
    std::vector<float> activations;     ///< feature activation at each window token

    bool operator==(const TopExample&) const = default;
};

/// True when a ranks strictly ahead of b in a top-K list.
bool ranks_before(const TopExample& a, const TopExample& b) noexcept;

struct TokenStat {
    TokenId token = 0;
    std::uint64_t count = 0;
    double mean_activation = 0.0;
    bool operator==(const TokenStat&) const = default;
};

/// Quantile levels reported in every record.
std::span<const double> quantile_levels();

struct FeatureRecord {
    FeatureKey key;
    std::vector<TopExample> top;       // sorted by ranks_before
    std::vector<TokenStat> top_tokens; // by mean activation, then count, then id
    std::vector<float> quantiles;      // of nonzero activations; empty if never active
    std::uint64_t active_count = 0;
    double frequency = 0.0;            // active tokens / tokens scanned
    std::optional<std::string> explanation;
    std::string explanation_source;    // "template", "remote", or empty
    std::optional<std::string> explanation_warning;
    std::map<std::string, std::string> tags;

    bool operator==(const FeatureRecord&) const = default;
};

/// Bounded-memory quantile summary. Exact until `capacity` values have been
/// seen; afterwards buffers are compacted deterministically (KLL style), each
/// compaction adding at most 2^level rank error.
class QuantileSketch {
public:
    explicit QuantileSketch(std::size_t capacity = 1024);
    void add(float v);
    std::uint64_t count() const noexcept { return count_; }
    /// Value at rank floor(q·(n−1)) of the (approximate) sorted stream.
    float quantile(double q) const;
    std::size_t retained() const noexcept;

private:
    void compact(std::size_t level);

    std::size_t capacity_;
    std::uint64_t count_ = 0;
    std::vector<std::vector<float>> levels_;
    std::vector<std::uint8_t> parity_;
};

/// Running state of one feature during a scan.
class FeatureAccumulator {
public:
    FeatureAccumulator(FeatureKey key, std::size_t top_k, std::size_t quantile_capacity = 4096);

    /// One token's activation (zeros count towards frequency only).
    void observe(TokenId token, float activation);
    /// Cheap pre-check before building a window.
    bool would_accept(float activation, std::uint32_t sequence_id, std::uint32_t position) const noexcept;
    void offer(TopExample example);
    std::size_t resident_examples() const noexcept { return heap_.size(); }

    FeatureRecord summarize(std::uint64_t tokens_scanned, std::size_t top_tokens) const;

private:
    FeatureKey key_;
    std::size_t k_;
    std::vector<TopExample> heap_;  // worst example at the front
    std::map<TokenId, std::pair<std::uint64_t, double>> tokens_;
    QuantileSketch sketch_;
    std::uint64_t active_ = 0;
};

struct StoreManifest {
    std::uint64_t config_hash = 0;
    std::uint64_t tokens_scanned = 0;
    std::vector<std::uint32_t> worker_ids;
    /// Largest number of top-K examples held at once by any worker.
    std::uint64_t peak_resident_examples = 0;
    /// Largest batch (tokens) resident at once.
    std::uint64_t peak_batch_tokens = 0;

    bool operator==(const StoreManifest&) const = default;
};

struct FeatureStore {
    StoreManifest manifest;
    std::map<FeatureKey, FeatureRecord> records;
};

/// Contiguous split of the flattened (layer, feature) space.
std::vector<std::pair<std::size_t, std::size_t>> worker_feature_spans(std::size_t num_layers, std::size_t d_features,
                                                                     std::size_t num_workers);

/// One streaming pass; returns one store per worker. Throws ConfigError when
/// the corpus holds fewer tokens than one batch.
std::vector<FeatureStore> scan(const CltModel& clt, const HostModel& model, std::span<const TokenSequence> corpus,
                               const AutointerpConfig& cfg);

/// Throws MergeError on overlapping keys or differing config hashes.
FeatureStore merge(std::vector<FeatureStore> stores);

/// Throws StateError unless every (layer, feature) of the shape is present.
void check_coverage(const FeatureStore& store, const CltShape& shape);

// --- explanations ----------------------------------------------------------

inline constexpr const char* no_activation_text = "(no activations observed)";

/// Window text with the peak token wrapped in [[ ]].
std::string render_window(const TopExample& ex);
/// Prompt listing every top example in order, one "Example i (activation a): ..." line each.
std::string render_prompt(const FeatureRecord& record);
/// Deterministic description built from the record alone.
std::string template_explanation(const FeatureRecord& record);

struct ExplanationRequest {
    FeatureKey key;
    std::string prompt;
    const FeatureRecord* record = nullptr;
};

class Explainer {
public:
    virtual ~Explainer() = default;
    virtual std::string name() const = 0;
    virtual std::string generate(const ExplanationRequest& request) = 0;
};

class TemplateExplainer final : public Explainer {
public:
    std::string name() const override { return "template"; }
    std::string generate(const ExplanationRequest& request) override;
};

/// POSTs {"prompt", "layer", "feature"} to `url` and reads {"text"}.
class HttpExplainer final : public Explainer {
public:
    explicit HttpExplainer(std::string url, double timeout_seconds = 10.0);
    std::string name() const override { return "remote"; }
    std::string generate(const ExplanationRequest& request) override;

private:
    std::string scheme_host_port_;
    std::string path_;
    double timeout_;
};

struct Explanation {
    std::string text;
    std::string source;
    std::optional<std::string> warning;
};

/// Generator failures fall back to the template text with a warning.
Explanation explain(const FeatureRecord& record, Explainer& generator);
/// Explains every record with at most `max_in_flight` concurrent requests.
void explain_all(FeatureStore& store, Explainer& generator, std::size_t max_in_flight = 4);

// --- features.cltf -----------------------------------------------------------

Bytes serialize_record(const FeatureRecord& record);
FeatureRecord deserialize_record(std::span<const std::uint8_t> bytes);

void save_store(const FeatureStore& store, const std::filesystem::path& path);
FeatureStore load_store(const std::filesystem::path& path);

/// Random access through the index footer without loading every record.
class FeatureStoreReader {
public:
    explicit FeatureStoreReader(std::filesystem::path path);
    const StoreManifest& manifest() const noexcept { return manifest_; }
    std::size_t size() const noexcept { return index_.size(); }
    bool contains(FeatureKey key) const { return index_.count(key) != 0; }
    /// Throws LookupError for an unknown key.
    FeatureRecord get(FeatureKey key) const;

private:
    std::filesystem::path path_;
    StoreManifest manifest_;
    std::map<FeatureKey, std::pair<std::uint64_t, std::uint64_t>> index_;  // offset, length
};

std::string record_to_json(const FeatureRecord& record);

}  // namespace cltforge
