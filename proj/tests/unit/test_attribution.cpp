// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cltforge/attribution.hpp"
#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"

using namespace cltforge;

namespace {

struct Fixture {
    HostModel model;
    CltModel clt;
    TokenSequence prompt;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x;
        Rng rng(23);
        x.model = HostModel::random(HostConfig{}, rng);
        CorpusSpec spec;
        spec.num_sequences = 4;
        const auto corpus = make_synthetic_corpus(rng, spec);
        x.prompt.assign(corpus[0].begin(), corpus[0].begin() + 7);
        x.clt = CltModel::random({2, 16, 2}, rng);
        for (auto& b : x.clt.b_dec)
            for (auto& v : b) v = static_cast<float>(rng.normal() * 0.05);
        const auto cap = forward_with_capture(x.model, x.prompt);
        for (std::size_t l = 0; l < 2; ++l) {
            double s = 0;
            for (std::size_t p = 0; p < cap.mlp_in[l].rows(); ++p) {
                double r = 0;
                for (float v : cap.mlp_in[l].row(p)) r += double(v) * v;
                s += std::sqrt(r);
            }
            x.clt.input_norm[l] = static_cast<float>(s / cap.mlp_in[l].rows());
            x.clt.output_norm[l] = 0.5f + 0.25f * l;
        }
        return x;
    }();
    return f;
}

const AttributionGraph& full_graph() {
    static const AttributionGraph g = build_graph(fixture().clt, fixture().model, fixture().prompt);
    return g;
}

std::size_t count_kind(const AttributionGraph& g, NodeKind k) {
    return std::count_if(g.nodes.begin(), g.nodes.end(), [&](const auto& n) { return n.kind == k; });
}

// Independent reference: removal effects from differenced frozen replays.
struct Oracle {
    const HostModel& model;
    const CltModel& clt;
    FrozenForwardState state;
    CapturedActivations cap;
    std::vector<std::vector<double>> m;      // captured MLP outputs
    std::vector<std::vector<double>> error;  // m − m̂, float reconstruction
    std::vector<Tensor2> z;

    Oracle(const HostModel& mo, const CltModel& c, const TokenSequence& t) : model(mo), clt(c) {
        state = freeze(model, t, &cap);
        std::vector<Tensor2> h;
        for (std::size_t l = 0; l < 2; ++l) {
            Tensor2 x = cap.mlp_in[l];
            for (float& v : x.storage()) v /= clt.input_norm[l];
            h.push_back(x);
        }
        z = encode(clt, h);
        for (std::size_t l = 0; l < 2; ++l) {
            m.emplace_back(cap.mlp_out[l].storage().begin(), cap.mlp_out[l].storage().end());
            const Tensor2 r = decode_cross_layer(clt, z, l);
            std::vector<double> e(m[l].size());
            for (std::size_t i = 0; i < e.size(); ++i) e[i] = m[l][i] - double(r.storage()[i]) * clt.output_norm[l];
            error.push_back(e);
        }
    }

    // Target value (pre-activation less bias, or logit) under given outputs.
    double read(const FrozenOutputs<double>& out, const AttributionNode& t) const {
        const std::size_t d = model.config.d_model, V = model.config.vocab, T = state.seq_len();
        if (t.kind == NodeKind::logit) return out.logits[(T - 1) * V + t.token];
        const std::size_t l = std::size_t(t.layer);
        double s = 0;
        for (std::size_t i = 0; i < d; ++i) s += double(clt.w_enc[l](t.feature, i)) * out.mlp_in[l][t.pos * d + i];
        return s / clt.input_norm[l];
    }

    double removal_effect(const AttributionNode& src, const AttributionNode& tgt) const {
        const std::size_t d = model.config.d_model;
        auto pert = m;
        FrozenForwardState st = state;
        if (src.kind == NodeKind::input) {
            for (float& v : st.residual0.row(src.pos)) v = 0.0f;
        } else if (src.kind == NodeKind::error) {
            for (std::size_t i = 0; i < d; ++i) pert[src.layer][src.pos * d + i] -= error[src.layer][src.pos * d + i];
        } else {
            const auto dec = effective_decoders(clt);
            for (std::size_t t = src.layer; t < 2; ++t) {
                const Tensor2& w = dec[decoder_index(2, src.layer, t)];
                for (std::size_t i = 0; i < d; ++i)
                    pert[t][src.pos * d + i] -= src.activation * clt.output_norm[t] * double(w(i, src.feature));
            }
        }
        return read(frozen_replay<double>(model, state, m), tgt) - read(frozen_replay<double>(model, st, pert), tgt);
    }
};

AttributionNode hand_node(NodeKind k, int layer, std::size_t pos, std::size_t f = 0, double prob = 0) {
    AttributionNode n;
    n.kind = k;
    n.layer = layer;
    n.pos = pos;
    n.feature = f;
    n.token = static_cast<TokenId>(f);
    n.probability = prob;
    return n;
}

}  // namespace

TEST(AttributionGraph, NodesAndIds) {
    const auto& g = full_graph();
    EXPECT_EQ(count_kind(g, NodeKind::input), fixture().prompt.size());
    EXPECT_EQ(count_kind(g, NodeKind::error), 2 * fixture().prompt.size());
    EXPECT_EQ(count_kind(g, NodeKind::logit), 5u);
    EXPECT_GT(count_kind(g, NodeKind::feature), 10u);
    EXPECT_TRUE(g.warnings.empty());
    for (std::size_t i = 0; i < g.nodes.size(); ++i) EXPECT_EQ(g.find(g.nodes[i].id()), i);
    EXPECT_FALSE(g.find("f:9:9:9").has_value());
    double prev = 2.0;
    for (const auto& n : g.nodes)
        if (n.kind == NodeKind::logit) {
            EXPECT_LE(n.probability, prev);
            prev = n.probability;
        }
}

TEST(AttributionGraph, IsDagAndCausal) {
    const auto& g = full_graph();
    EXPECT_TRUE(is_dag(g));
    for (const auto& e : g.edges) {
        const auto& s = g.nodes[e.source];
        const auto& t = g.nodes[e.target];
        EXPECT_NE(e.weight, 0.0);
        EXPECT_NE(s.kind, NodeKind::logit);
        EXPECT_TRUE(t.kind == NodeKind::feature || t.kind == NodeKind::logit);
        if (t.kind == NodeKind::feature) {
            EXPECT_LE(s.pos, t.pos);
            if (s.kind != NodeKind::input) EXPECT_LT(s.layer, t.layer);
        }
    }
    AttributionGraph cyc = g;
    cyc.edges.push_back({cyc.edges[0].target, cyc.edges[0].source, 1.0});
    EXPECT_FALSE(is_dag(cyc));
}

TEST(AttributionGraph, EdgesMatchRemovalEffects) {
    const auto& fx = fixture();
    const auto& g = full_graph();
    const Oracle o(fx.model, fx.clt, fx.prompt);
    double worst = 0;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < g.edges.size(); i += 1 + g.edges.size() / 400) {
        const auto& e = g.edges[i];
        const double ref = o.removal_effect(g.nodes[e.source], g.nodes[e.target]);
        worst = std::max(worst, std::fabs(ref - e.weight) / std::max(1.0, std::fabs(ref)));
        ++checked;
    }
    EXPECT_GT(checked, 100u);
    EXPECT_LE(worst, 1e-4);
}

TEST(AttributionGraph, MissingEdgesHaveNoEffect) {
    const auto& fx = fixture();
    const auto& g = full_graph();
    const Oracle o(fx.model, fx.clt, fx.prompt);
    // Later-position sources never reach earlier targets.
    const auto tgt = std::find_if(g.nodes.begin(), g.nodes.end(),
                                  [](const auto& n) { return n.kind == NodeKind::feature && n.layer == 1 && n.pos == 0; });
    ASSERT_NE(tgt, g.nodes.end());
    for (const auto& s : g.nodes)
        if (s.kind != NodeKind::logit && s.pos > 0) EXPECT_EQ(o.removal_effect(s, *tgt), 0.0);
}

TEST(AttributionGraph, AdditiveWithBiasPath) {
    const auto& fx = fixture();
    const auto& g = full_graph();
    const Oracle o(fx.model, fx.clt, fx.prompt);
    // Constant part: no embeddings, MLP outputs equal to the decoder bias alone.
    FrozenForwardState st = o.state;
    st.residual0.fill(0.0f);
    std::vector<std::vector<double>> bias(2);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t p = 0; p < fx.prompt.size(); ++p)
            for (float b : fx.clt.b_dec[l]) bias[l].push_back(double(b) * fx.clt.output_norm[l]);
    const auto konst = frozen_replay<double>(fx.model, st, bias);
    const auto full = frozen_replay<double>(fx.model, o.state, o.m);
    std::vector<double> sum(g.nodes.size(), 0.0);
    for (const auto& e : g.edges) sum[e.target] += e.weight;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const auto& t = g.nodes[i];
        if (t.kind != NodeKind::logit && !(t.kind == NodeKind::feature && t.layer == 1)) continue;
        const double want = o.read(full, t) - o.read(konst, t);
        EXPECT_NEAR(sum[i], want, 1e-4 * std::max(1.0, std::fabs(want))) << t.id();
    }
}

TEST(AttributionGraph, ZeroDecodersGiveZeroReplacement) {
    const auto& fx = fixture();
    CltModel clt = fx.clt;
    for (auto& w : clt.w_dec) w.fill(0.0f);
    const auto g = build_graph(clt, fx.model, fx.prompt);
    EXPECT_GT(count_kind(g, NodeKind::feature), 0u);
    for (const auto& e : g.edges) EXPECT_NE(g.nodes[e.source].kind, NodeKind::feature);
    EXPECT_EQ(g.replacement_score, 0.0);
}

TEST(AttributionGraph, ZeroErrorsGiveFullReplacement) {
    const auto& fx = fixture();
    AttributionConfig cfg;
    cfg.zero_errors = true;
    const auto g = build_graph(fx.clt, fx.model, fx.prompt, cfg);
    for (const auto& e : g.edges) EXPECT_NE(g.nodes[e.source].kind, NodeKind::error);
    EXPECT_EQ(g.replacement_score, 1.0);
    EXPECT_GT(full_graph().replacement_score, 0.0);
    EXPECT_LT(full_graph().replacement_score, 1.0);
}

TEST(AttributionGraph, InactiveCltWarns) {
    const auto& fx = fixture();
    CltModel clt = fx.clt;
    for (auto& b : clt.b_enc) std::fill(b.begin(), b.end(), -1e3f);
    const auto g = build_graph(clt, fx.model, fx.prompt);
    EXPECT_EQ(count_kind(g, NodeKind::feature), 0u);
    ASSERT_EQ(g.warnings.size(), 1u);
    EXPECT_EQ(g.replacement_score, 0.0);
    EXPECT_TRUE(is_dag(g));
}

TEST(AttributionGraph, RejectsBadInput) {
    const auto& fx = fixture();
    EXPECT_THROW(build_graph(fx.clt, fx.model, TokenSequence{}), InputError);
    Rng rng(1);
    const CltModel wide = CltModel::random({2, 8, 2}, rng);
    EXPECT_THROW(build_graph(wide, fx.model, fx.prompt), ConfigError);
}

TEST(AttributionGraph, SingleReplacementLayer) {
    // A CLT whose upper layer never fires: the graph reduces to one
    // replacement layer feeding the logits directly.
    const auto& fx = fixture();
    CltModel clt = fx.clt;
    std::fill(clt.b_enc[1].begin(), clt.b_enc[1].end(), -1e3f);
    const auto g = build_graph(clt, fx.model, fx.prompt);
    EXPECT_TRUE(is_dag(g));
    EXPECT_GT(count_kind(g, NodeKind::feature), 0u);
    const Oracle o(fx.model, clt, fx.prompt);
    for (const auto& e : g.edges) {
        const auto& s = g.nodes[e.source];
        const auto& t = g.nodes[e.target];
        if (t.kind == NodeKind::feature) {
            EXPECT_EQ(t.layer, 0);
            EXPECT_EQ(s.kind, NodeKind::input);
        }
        EXPECT_NEAR(e.weight, o.removal_effect(s, t), 1e-4 * std::max(1.0, std::fabs(e.weight)));
    }
}

// --- influence, pruning, completeness -------------------------------------------

TEST(AttributionInfluence, HandReplacementRatio) {
    AttributionGraph g;
    g.nodes = {hand_node(NodeKind::input, -1, 0), hand_node(NodeKind::feature, 0, 0),
               hand_node(NodeKind::error, 0, 0), hand_node(NodeKind::logit, -1, 0, 3, 0.5)};
    g.edges = {{0, 1, 3.0}, {1, 3, -3.0}, {2, 3, 1.0}};
    const auto inf = node_influence(g);
    EXPECT_DOUBLE_EQ(inf[3], 0.5);
    EXPECT_DOUBLE_EQ(inf[1], 0.375);
    EXPECT_DOUBLE_EQ(inf[2], 0.125);
    EXPECT_DOUBLE_EQ(inf[0], 0.375);
    EXPECT_DOUBLE_EQ(replacement_score(g), 0.75);
    AttributionGraph empty;
    EXPECT_EQ(replacement_score(empty), 1.0);
}

TEST(AttributionInfluence, ChainWithNegligibleBranch) {
    AttributionGraph g;
    g.nodes = {hand_node(NodeKind::input, -1, 0), hand_node(NodeKind::feature, 0, 0, 0),
               hand_node(NodeKind::feature, 0, 0, 1), hand_node(NodeKind::logit, -1, 0, 2, 1.0)};
    g.edges = {{0, 1, 2.0}, {0, 2, 1.0}, {1, 3, 1.0}, {2, 3, 1e-9}};
    const auto inf = node_influence(g);
    EXPECT_NEAR(inf[1], 1.0 / (1.0 + 1e-9), 1e-15);
    EXPECT_NEAR(inf[2], 1e-9 / (1.0 + 1e-9), 1e-20);
    EXPECT_NEAR(inf[0], 1.0, 1e-15);

    const auto p = prune(g, 0.99, 1.0);
    ASSERT_EQ(p.nodes.size(), 3u);
    EXPECT_FALSE(p.find("f:0:0:1").has_value());
    EXPECT_EQ(p.edges.size(), 2u);
    EXPECT_NEAR(p.completeness, 1.0, 1e-8);
    EXPECT_LT(p.completeness, 1.0);

    // The chain's two edges each hold half the edge influence; keeping one
    // cuts every path from the logit to the input.
    const auto q = prune(g, 1.0, 0.4);
    EXPECT_EQ(q.nodes.size(), 4u);
    EXPECT_EQ(q.edges.size(), 1u);
    EXPECT_EQ(completeness(g, q), 0.0);
}

TEST(AttributionInfluence, FullMassPruneIsIdentity) {
    const auto& g = full_graph();
    const auto p = prune(g, 1.0, 1.0);
    EXPECT_EQ(p.nodes, g.nodes);
    EXPECT_EQ(p.edges, g.edges);
    EXPECT_EQ(p.completeness, 1.0);
    EXPECT_EQ(completeness(g, g), 1.0);
    EXPECT_THROW(prune(g, 0.0, 1.0), InputError);
    EXPECT_THROW(prune(g, 1.0, 1.5), InputError);
}

TEST(AttributionInfluence, CompletenessMonotoneInNodeMass) {
    const auto& g = full_graph();
    double prev = -1;
    std::size_t prev_nodes = 0;
    for (double p : {0.05, 0.2, 0.4, 0.6, 0.8, 0.9, 0.99, 1.0}) {
        const auto q = prune(g, p, 1.0);
        EXPECT_TRUE(is_dag(q));
        EXPECT_GE(q.completeness, prev - 1e-12) << p;
        EXPECT_GE(q.nodes.size(), prev_nodes);
        prev = q.completeness;
        prev_nodes = q.nodes.size();
    }
    EXPECT_EQ(prev, 1.0);
    const auto tight = prune(g, 0.5, 0.9);
    EXPECT_LT(tight.nodes.size(), g.nodes.size());
    EXPECT_LT(tight.edges.size(), g.edges.size());
    EXPECT_EQ(count_kind(tight, NodeKind::input), count_kind(g, NodeKind::input));
    EXPECT_EQ(count_kind(tight, NodeKind::logit), 5u);
}

TEST(AttributionInfluence, ScaleInvariant) {
    const auto& g = full_graph();
    AttributionGraph s = g;
    for (auto& e : s.edges) e.weight *= 8.0;
    const auto a = node_influence(g), b = node_influence(s);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    EXPECT_NEAR(replacement_score(g), replacement_score(s), 1e-12);
    EXPECT_EQ(prune(g, 0.7, 0.9).nodes, prune(s, 0.7, 0.9).nodes);
    AttributionGraph lg = g;
    for (auto& e : lg.edges)
        if (lg.nodes[e.target].kind == NodeKind::logit) e.weight *= 3.5;
    EXPECT_EQ(prune(g, 0.6, 1.0).nodes, prune(lg, 0.6, 1.0).nodes);
}

// --- interventions ----------------------------------------------------------------

TEST(AttributionIntervene, NoOpEditsAreExact) {
    const auto& fx = fixture();
    const auto& g = full_graph();
    std::string id;
    for (const auto& n : g.nodes)
        if (n.kind == NodeKind::feature) id = n.id();
    for (auto mode : {InterventionMode::frozen, InterventionMode::propagate}) {
        for (const auto& edits : {std::vector<FeatureEdit>{}, std::vector<FeatureEdit>{{{id}, EditAction::scale, 1.0}}}) {
            const auto r = intervene(fx.clt, fx.model, fx.prompt, edits, mode);
            for (double d : r.delta_all) EXPECT_EQ(d, 0.0);
            EXPECT_TRUE(r.changed_features.empty());
            ASSERT_EQ(r.logits.size(), 5u);
        }
    }
}

TEST(AttributionIntervene, AblationUndoesEdge) {
    const auto& fx = fixture();
    const auto& g = full_graph();
    std::size_t tested = 0;
    for (const auto& e : g.edges) {
        const auto& s = g.nodes[e.source];
        const auto& t = g.nodes[e.target];
        if (s.kind != NodeKind::feature || t.kind != NodeKind::logit || tested >= 10) continue;
        const auto r = intervene(fx.clt, fx.model, fx.prompt, {{{s.id()}, EditAction::ablate, 0.0}});
        EXPECT_NEAR(r.delta_all[t.token], -e.weight, 1e-4 * std::max(1.0, std::fabs(e.weight)));
        ASSERT_EQ(r.changed_features.size(), 1u);
        EXPECT_EQ(r.changed_features[0].id, s.id());
        EXPECT_EQ(r.changed_features[0].after, 0.0);
        ++tested;
    }
    EXPECT_EQ(tested, 10u);
}

TEST(AttributionIntervene, ClusterAndSetEdits) {
    const auto& fx = fixture();
    const auto& g = full_graph();
    std::vector<std::string> cluster;
    for (const auto& n : g.nodes)
        if (n.kind == NodeKind::feature && n.layer == 0 && cluster.size() < 3) cluster.push_back(n.id());
    const auto r = intervene(fx.clt, fx.model, fx.prompt, {{cluster, EditAction::scale, 2.0}});
    EXPECT_EQ(r.changed_features.size(), 3u);
    EXPECT_EQ(r.edited_effects.size(), 3u);
    const auto p = intervene(fx.clt, fx.model, fx.prompt, {{cluster, EditAction::scale, 2.0}}, InterventionMode::propagate);
    EXPECT_GE(p.changed_features.size(), 3u);
    // Setting an inactive feature is allowed.
    const auto s = intervene(fx.clt, fx.model, fx.prompt, {{{"f:0:0:0"}, EditAction::set, 1.5}});
    EXPECT_FALSE(s.changed_features.empty());
}

TEST(AttributionIntervene, UnknownNodesRaise) {
    const auto& fx = fixture();
    auto run = [&](const std::string& id, EditAction a) {
        return intervene(fx.clt, fx.model, fx.prompt, {{{id}, a, 1.0}});
    };
    EXPECT_THROW(run("f:5:0:0", EditAction::set), LookupError);
    EXPECT_THROW(run("f:0:99:0", EditAction::set), LookupError);
    EXPECT_THROW(run("e:0:0", EditAction::ablate), LookupError);
    EXPECT_THROW(run("bogus", EditAction::ablate), LookupError);
    EXPECT_THROW(run("f:0:x:0", EditAction::ablate), LookupError);
    CltModel dead = fx.clt;
    std::fill(dead.b_enc[0].begin(), dead.b_enc[0].end(), -1e3f);
    EXPECT_THROW(intervene(dead, fx.model, fx.prompt, {{{"f:0:0:0"}, EditAction::ablate, 0.0}}), LookupError);
    EXPECT_THROW(parse_edit_action("zero"), InputError);
    EXPECT_THROW(parse_intervention_mode("live"), InputError);
    EXPECT_EQ(parse_edit_action("scale"), EditAction::scale);
}

// --- JSON ---------------------------------------------------------------------------

TEST(AttributionJson, RoundTrip) {
    const auto p = prune(full_graph(), 0.8, 0.98);
    const auto back = graph_from_json(graph_to_json(p));
    EXPECT_EQ(back.prompt, p.prompt);
    EXPECT_EQ(back.tokens, p.tokens);
    EXPECT_EQ(back.nodes, p.nodes);
    EXPECT_EQ(back.edges, p.edges);
    EXPECT_EQ(back.replacement_score, p.replacement_score);
    EXPECT_EQ(back.completeness, p.completeness);
    EXPECT_EQ(back.node_mass, 0.8);
    EXPECT_EQ(graph_to_json(back), graph_to_json(p));
    EXPECT_THROW(graph_from_json("{"), InputError);
    EXPECT_THROW(graph_from_json("{\"schema_version\": 99}"), InputError);
}
