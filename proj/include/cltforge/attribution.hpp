// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Attribution graphs over the frozen host model with the CLT as a local
// replacement: every MLP output m_ℓ is split into feature contributions
// z·W_dec (from every source layer ≤ ℓ), the decoder bias, and an error
// vector m_ℓ − m̂_ℓ. With attention patterns, norm scales and masks frozen,
// the map from these vectors (and the input embeddings) to MLP inputs and
// logits is linear, so
//
//   a(src → (ℓ', k', n')) = g_{n'} · J(src → (ℓ', k')) · v_src / in_norm_ℓ'
//
// where v_src is the source's written vector in host units and g_{n'} is the
// encoder row. Edge weights are in units of the target's pre-activation (or
// logit), so each equals the effect of removing its source. All graph math
// is in double.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cltforge/clt.hpp"
#include "cltforge/host_model.hpp"

namespace cltforge {

enum class NodeKind { feature, input, error, logit };

std::string node_kind_name(NodeKind k);

struct AttributionNode {
    NodeKind kind = NodeKind::feature;
    int layer = -1;            // feature / error; -1 otherwise
    std::size_t pos = 0;       // feature / error / input
    std::size_t feature = 0;   // feature
    TokenId token = 0;         // input / logit
    double activation = 0.0;   // feature: z; error: ‖m − m̂‖; logit: logit value
    double probability = 0.0;  // logit
    std::string label;

    /// f:{l}:{p}:{n}, e:{l}:{p}, in:{p}, logit:{tok}
    std::string id() const;
    bool operator==(const AttributionNode&) const = default;
};

struct AttributionEdge {
    std::size_t source = 0;  // node indices
    std::size_t target = 0;
    double weight = 0.0;
    bool operator==(const AttributionEdge&) const = default;
};

struct AttributionConfig {
    std::size_t max_logits = 5;  ///< logit nodes: top tokens by probability at the last position
    JacobianPath path = JacobianPath::direct;
    double node_mass = 0.8;
    double edge_mass = 0.98;
    /// Error vectors replaced by zero: attributes the replacement model itself.
    bool zero_errors = false;
};

struct AttributionGraph {
    std::string prompt;
    TokenSequence tokens;
    std::vector<AttributionNode> nodes;
    std::vector<AttributionEdge> edges;
    double replacement_score = 0.0;
    double completeness = 1.0;
    double node_mass = 1.0;  // pruning used; 1, 1 for an unpruned graph
    double edge_mass = 1.0;
    std::vector<std::string> warnings;

    std::optional<std::size_t> find(const std::string& node_id) const;
};

/// Every active feature, error (layer, pos), input position and top logit
/// becomes a node; every nonzero causal pairing becomes an edge. No active
/// features yields a graph with a warning instead of an error.
AttributionGraph build_graph(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                             const AttributionConfig& cfg = {});

/// Kahn's algorithm over the edge list.
bool is_dag(const AttributionGraph& g);

/// Influence of every node on the logit nodes: logits start with their
/// probability; each node passes influence back to its sources in
/// proportion to |edge| / Σ|edges into the target|, in topological order.
std::vector<double> node_influence(const AttributionGraph& g);

/// Σ influence of feature nodes / (Σ feature + Σ error influence); 1 when both are 0.
double replacement_score(const AttributionGraph& g);

/// Keeps the smallest set of feature and error nodes (by influence) holding
/// node_mass of their total, then the smallest edge set among the kept nodes
/// holding edge_mass of the remaining edge influence. Input and logit nodes
/// are always kept; masses of 1 keep everything.
AttributionGraph prune(const AttributionGraph& g, double node_mass, double edge_mass);

/// Logit influence that still reaches an input or error node through the
/// pruned graph, with edge normalization taken from the full graph, over
/// the same quantity for the full graph.
double completeness(const AttributionGraph& full, const AttributionGraph& pruned);

// --- interventions ---------------------------------------------------------

enum class EditAction { set, scale, ablate };
enum class InterventionMode { frozen, propagate };

EditAction parse_edit_action(const std::string& s);
InterventionMode parse_intervention_mode(const std::string& s);

struct FeatureEdit {
    std::vector<std::string> node_ids;  // feature node ids; several for a cluster
    EditAction action = EditAction::ablate;
    double value = 0.0;  // set: new activation; scale: factor
};

struct LogitDelta {
    TokenId token = 0;
    double before = 0.0;
    double after = 0.0;
    double delta = 0.0;
};

struct FeatureChange {
    std::string id;
    double before = 0.0;
    double after = 0.0;
};

struct NodeEffect {
    std::string id;
    double logit_effect = 0.0;  // direct effect on the top logit after the edit
};

struct InterventionReport {
    InterventionMode mode = InterventionMode::frozen;
    std::vector<LogitDelta> logits;     // baseline top tokens, same selection as the graph
    std::vector<double> delta_all;      // every vocab entry at the last position
    std::vector<FeatureChange> changed_features;
    std::vector<NodeEffect> edited_effects;
};

/// Local-replacement rerun: MLP outputs are rebuilt from (edited) feature
/// activations plus the original error vectors. Frozen mode holds every
/// other feature fixed; propagate mode re-encodes downstream features from
/// the new MLP inputs. Unknown or inactive (unless set) features raise
/// LookupError.
InterventionReport intervene(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                             const std::vector<FeatureEdit>& edits, InterventionMode mode = InterventionMode::frozen,
                             const AttributionConfig& cfg = {});

/// The checks intervene() runs before any replay.
void validate_edits(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                    const std::vector<FeatureEdit>& edits);

// --- JSON --------------------------------------------------------------------

inline constexpr int graph_schema_version = 1;

std::string graph_to_json(const AttributionGraph& g);
AttributionGraph graph_from_json(const std::string& text);
std::string report_to_json(const InterventionReport& r);

}  // namespace cltforge
