// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>

#include <json.hpp>

#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"

namespace cltforge {

namespace {

// Original forward split into replacement terms, all in host units.
struct LocalReplacement {
    FrozenForwardState state;
    CapturedActivations cap;
    std::vector<Tensor2> z;                   // [layer] T × F
    std::vector<Tensor2> dec;                 // effective decoders
    std::vector<std::vector<double>> error;   // [layer] T·d
    std::size_t L = 0, d = 0, F = 0, T = 0;
};

void check_compatible(const CltModel& clt, const HostModel& model) {
    if (clt.shape.num_layers != model.config.num_layers || clt.shape.d_model != model.config.d_model)
        throw ConfigError("CLT shape (" + std::to_string(clt.shape.num_layers) + " layers, d=" +
                          std::to_string(clt.shape.d_model) + ") does not match the host model");
}

double dec_scale(const CltModel& clt, std::size_t layer) { return clt.output_norm[layer]; }

// m̂ in host units from double activations z[layer][pos·F + feature].
std::vector<std::vector<double>> reconstruct(const CltModel& clt, const std::vector<Tensor2>& dec,
                                             const std::vector<std::vector<double>>& z, std::size_t T) {
    const std::size_t L = clt.shape.num_layers, d = clt.shape.d_model, F = clt.shape.d_features();
    std::vector<std::vector<double>> out(L, std::vector<double>(T * d, 0.0));
    for (std::size_t t = 0; t < L; ++t) {
        auto& m = out[t];
        for (std::size_t s = 0; s <= t; ++s) {
            const Tensor2& w = dec[decoder_index(L, s, t)];
            for (std::size_t k = 0; k < T; ++k)
                for (std::size_t n = 0; n < F; ++n) {
                    const double a = z[s][k * F + n];
                    if (a == 0.0) continue;
                    for (std::size_t i = 0; i < d; ++i) m[k * d + i] += a * w(i, n);
                }
        }
        const double scale = dec_scale(clt, t);
        for (std::size_t k = 0; k < T; ++k)
            for (std::size_t i = 0; i < d; ++i)
                m[k * d + i] = scale * (m[k * d + i] + static_cast<double>(clt.b_dec[t][i]));
    }
    return out;
}

std::vector<std::vector<double>> as_double(const std::vector<Tensor2>& z) {
    std::vector<std::vector<double>> out;
    for (const auto& t : z) out.emplace_back(t.storage().begin(), t.storage().end());
    return out;
}

LocalReplacement local_replacement(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                                   bool zero_errors) {
    check_compatible(clt, model);
    if (tokens.empty()) throw InputError("attribution needs a non-empty prompt");
    LocalReplacement lr;
    lr.state = freeze(model, tokens, &lr.cap);
    lr.L = clt.shape.num_layers;
    lr.d = clt.shape.d_model;
    lr.F = clt.shape.d_features();
    lr.T = tokens.size();
    std::vector<Tensor2> h;
    for (std::size_t l = 0; l < lr.L; ++l) {
        Tensor2 x = lr.cap.mlp_in[l];
        for (float& v : x.storage()) v /= clt.input_norm[l];
        h.push_back(std::move(x));
    }
    lr.z = encode(clt, h);
    lr.dec = effective_decoders(clt);
    const auto recon = reconstruct(clt, lr.dec, as_double(lr.z), lr.T);
    lr.error.assign(lr.L, std::vector<double>(lr.T * lr.d, 0.0));
    if (!zero_errors)
        for (std::size_t l = 0; l < lr.L; ++l)
            for (std::size_t i = 0; i < lr.T * lr.d; ++i)
                lr.error[l][i] = static_cast<double>(lr.cap.mlp_out[l].storage()[i]) - recon[l][i];
    return lr;
}

// Injections written by feature (layer, pos, n) at activation a.
std::vector<Injection> feature_injections(const CltModel& clt, const LocalReplacement& lr, std::size_t layer,
                                          std::size_t pos, std::size_t n, double a) {
    std::vector<Injection> out;
    for (std::size_t m = layer; m < lr.L; ++m) {
        const Tensor2& w = lr.dec[decoder_index(lr.L, layer, m)];
        Injection inj{static_cast<int>(m), pos, std::vector<double>(lr.d)};
        const double scale = a * dec_scale(clt, m);
        for (std::size_t i = 0; i < lr.d; ++i) inj.vec[i] = scale * w(i, n);
        out.push_back(std::move(inj));
    }
    return out;
}

std::vector<TokenId> top_tokens(std::span<const double> logits, std::size_t k) {
    std::vector<TokenId> ids(logits.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
    ids.resize(std::min(k, ids.size()));
    return ids;
}

std::vector<double> softmax(std::span<const double> x) {
    const double mx = *std::max_element(x.begin(), x.end());
    std::vector<double> p(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += p[i] = std::exp(x[i] - mx);
    for (double& v : p) v /= s;
    return p;
}

std::string quote(TokenId t) { return "'" + token_text(t) + "'"; }

// Topological level: inputs −1, features / errors at their layer, logits on top.
int level(const AttributionNode& n, int num_layers) {
    switch (n.kind) {
        case NodeKind::input: return -1;
        case NodeKind::logit: return num_layers;
        default: return n.layer;
    }
}

int graph_layers(const AttributionGraph& g) {
    int top = 0;
    for (const auto& n : g.nodes)
        if (n.kind == NodeKind::feature || n.kind == NodeKind::error) top = std::max(top, n.layer + 1);
    return top;
}

// Influence propagation with per-target normalizers `denom`, over g's edges.
std::vector<double> propagate(const AttributionGraph& g, const std::vector<double>& denom) {
    const std::size_t N = g.nodes.size();
    const int top = graph_layers(g);
    std::vector<std::vector<std::size_t>> out_edges(N);
    for (std::size_t e = 0; e < g.edges.size(); ++e) out_edges[g.edges[e].source].push_back(e);
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return level(g.nodes[a], top) > level(g.nodes[b], top);
    });
    std::vector<double> inf(N, 0.0);
    for (std::size_t u : order) {
        if (g.nodes[u].kind == NodeKind::logit) {
            inf[u] = g.nodes[u].probability;
            continue;
        }
        double s = 0.0;
        for (std::size_t e : out_edges[u]) {
            const auto& edge = g.edges[e];
            if (denom[edge.target] > 0.0) s += inf[edge.target] * std::fabs(edge.weight) / denom[edge.target];
        }
        inf[u] = s;
    }
    return inf;
}

std::vector<double> abs_in_weight(const AttributionGraph& g) {
    std::vector<double> denom(g.nodes.size(), 0.0);
    for (const auto& e : g.edges) denom[e.target] += std::fabs(e.weight);
    return denom;
}

// Logit influence arriving at input and error nodes.
double terminal_mass(const AttributionGraph& g, const std::vector<double>& denom) {
    const auto inf = propagate(g, denom);
    double s = 0.0;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (g.nodes[i].kind == NodeKind::input || g.nodes[i].kind == NodeKind::error) s += inf[i];
    return s;
}

void check_mass(double p, const char* what) {
    if (!(p > 0.0 && p <= 1.0)) throw InputError(std::string(what) + " must be in (0, 1]");
}

struct ParsedId {
    NodeKind kind;
    long long a = 0, b = 0, c = 0;
};

ParsedId parse_id(const std::string& id) {
    std::vector<std::string> parts;
    std::stringstream ss(id);
    std::string p;
    while (std::getline(ss, p, ':')) parts.push_back(p);
    auto num = [&](const std::string& s) -> long long {
        if (s.empty() || s.size() > 12 || !std::all_of(s.begin(), s.end(), ::isdigit))
            throw LookupError("malformed node id '" + id + "'");
        return std::stoll(s);
    };
    if (parts.size() == 4 && parts[0] == "f") return {NodeKind::feature, num(parts[1]), num(parts[2]), num(parts[3])};
    if (parts.size() == 3 && parts[0] == "e") return {NodeKind::error, num(parts[1]), num(parts[2]), 0};
    if (parts.size() == 2 && parts[0] == "in") return {NodeKind::input, num(parts[1]), 0, 0};
    if (parts.size() == 2 && parts[0] == "logit") return {NodeKind::logit, num(parts[1]), 0, 0};
    throw LookupError("unknown node id '" + id + "'");
}

}  // namespace

std::string node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::feature: return "feature";
        case NodeKind::input: return "input";
        case NodeKind::error: return "error";
        case NodeKind::logit: return "logit";
    }
    return "?";
}

std::string AttributionNode::id() const {
    switch (kind) {
        case NodeKind::feature:
            return "f:" + std::to_string(layer) + ":" + std::to_string(pos) + ":" + std::to_string(feature);
        case NodeKind::error: return "e:" + std::to_string(layer) + ":" + std::to_string(pos);
        case NodeKind::input: return "in:" + std::to_string(pos);
        case NodeKind::logit: return "logit:" + std::to_string(token);
    }
    return "?";
}

std::optional<std::size_t> AttributionGraph::find(const std::string& node_id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].id() == node_id) return i;
    return std::nullopt;
}

AttributionGraph build_graph(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                             const AttributionConfig& cfg) {
    const LocalReplacement lr = local_replacement(clt, model, tokens, cfg.zero_errors);
    const std::size_t L = lr.L, d = lr.d, F = lr.F, T = lr.T, V = model.config.vocab;
    AttributionGraph g;
    g.tokens.assign(tokens.begin(), tokens.end());
    g.prompt = detokenize(tokens);

    for (std::size_t k = 0; k < T; ++k) {
        AttributionNode n;
        n.kind = NodeKind::input;
        n.pos = k;
        n.token = tokens[k];
        n.label = quote(tokens[k]);
        g.nodes.push_back(n);
    }
    std::size_t active = 0;
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t k = 0; k < T; ++k)
            for (std::size_t f = 0; f < F; ++f) {
                const float a = lr.z[l](k, f);
                if (a <= 0.0f) continue;
                AttributionNode n;
                n.kind = NodeKind::feature;
                n.layer = static_cast<int>(l);
                n.pos = k;
                n.feature = f;
                n.activation = a;
                n.label = "L" + std::to_string(l) + "/" + std::to_string(f) + " @" + quote(tokens[k]);
                g.nodes.push_back(n);
                ++active;
            }
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t k = 0; k < T; ++k) {
            AttributionNode n;
            n.kind = NodeKind::error;
            n.layer = static_cast<int>(l);
            n.pos = k;
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += lr.error[l][k * d + i] * lr.error[l][k * d + i];
            n.activation = std::sqrt(s);
            n.label = "error L" + std::to_string(l) + " @" + quote(tokens[k]);
            g.nodes.push_back(n);
        }
    std::vector<double> last(V);
    for (std::size_t v = 0; v < V; ++v) last[v] = lr.cap.logits(T - 1, v);
    const auto probs = softmax(last);
    const auto targets = top_tokens(last, cfg.max_logits);
    const std::size_t first_logit = g.nodes.size();
    for (TokenId t : targets) {
        AttributionNode n;
        n.kind = NodeKind::logit;
        n.token = t;
        n.activation = last[t];
        n.probability = probs[t];
        n.label = "logit " + quote(t);
        g.nodes.push_back(n);
    }
    if (active == 0) g.warnings.push_back("no CLT features are active on this prompt");

    // Every source's frozen response, read off at each target.
    std::vector<std::size_t> feature_nodes;
    for (std::size_t i = 0; i < first_logit; ++i)
        if (g.nodes[i].kind == NodeKind::feature) feature_nodes.push_back(i);
    for (std::size_t src = 0; src < first_logit; ++src) {
        const AttributionNode& s = g.nodes[src];
        std::vector<Injection> inj;
        int src_level = -1;
        if (s.kind == NodeKind::input) {
            const auto row = lr.state.residual0.row(s.pos);
            inj.push_back({kEmbeddingLayer, s.pos, std::vector<double>(row.begin(), row.end())});
        } else if (s.kind == NodeKind::feature) {
            inj = feature_injections(clt, lr, std::size_t(s.layer), s.pos, s.feature, s.activation);
            src_level = s.layer;
        } else {
            const auto& e = lr.error[std::size_t(s.layer)];
            inj.push_back({s.layer, s.pos, std::vector<double>(e.begin() + s.pos * d, e.begin() + (s.pos + 1) * d)});
            src_level = s.layer;
        }
        const FrozenResponse r = frozen_response(model, lr.state, inj, cfg.path);
        for (std::size_t tgt : feature_nodes) {
            const AttributionNode& t = g.nodes[tgt];
            if (t.layer <= src_level || t.pos < s.pos) continue;
            const std::size_t tl = std::size_t(t.layer);
            const float* gvec = clt.w_enc[tl].row(t.feature).data();
            const double* x = &r.mlp_in[tl][t.pos * d];
            double w = 0.0;
            for (std::size_t i = 0; i < d; ++i) w += static_cast<double>(gvec[i]) * x[i];
            w /= clt.input_norm[tl];
            if (w != 0.0) g.edges.push_back({src, tgt, w});
        }
        for (std::size_t tgt = first_logit; tgt < g.nodes.size(); ++tgt) {
            const double w = r.logits[(T - 1) * V + g.nodes[tgt].token];
            if (w != 0.0) g.edges.push_back({src, tgt, w});
        }
    }
    g.replacement_score = replacement_score(g);
    g.completeness = 1.0;
    return g;
}

bool is_dag(const AttributionGraph& g) {
    const std::size_t N = g.nodes.size();
    std::vector<std::size_t> indeg(N, 0);
    std::vector<std::vector<std::size_t>> out(N);
    for (const auto& e : g.edges) {
        if (e.source >= N || e.target >= N) return false;
        out[e.source].push_back(e.target);
        ++indeg[e.target];
    }
    std::queue<std::size_t> q;
    for (std::size_t i = 0; i < N; ++i)
        if (indeg[i] == 0) q.push(i);
    std::size_t seen = 0;
    while (!q.empty()) {
        const std::size_t u = q.front();
        q.pop();
        ++seen;
        for (std::size_t v : out[u])
            if (--indeg[v] == 0) q.push(v);
    }
    return seen == N;
}

std::vector<double> node_influence(const AttributionGraph& g) { return propagate(g, abs_in_weight(g)); }

double replacement_score(const AttributionGraph& g) {
    const auto inf = node_influence(g);
    double f = 0.0, e = 0.0;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        if (g.nodes[i].kind == NodeKind::feature) f += inf[i];
        if (g.nodes[i].kind == NodeKind::error) e += inf[i];
    }
    if (f + e == 0.0) return 1.0;
    return f / (f + e);
}

AttributionGraph prune(const AttributionGraph& g, double node_mass, double edge_mass) {
    check_mass(node_mass, "node_mass");
    check_mass(edge_mass, "edge_mass");
    const std::size_t N = g.nodes.size();
    const auto denom = abs_in_weight(g);
    const auto inf = propagate(g, denom);

    std::vector<std::uint8_t> keep(N, 1);
    if (node_mass < 1.0) {
        std::vector<std::size_t> cand;
        double total = 0.0;
        for (std::size_t i = 0; i < N; ++i)
            if (g.nodes[i].kind == NodeKind::feature || g.nodes[i].kind == NodeKind::error) {
                cand.push_back(i);
                total += inf[i];
                keep[i] = 0;
            }
        std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return inf[a] > inf[b]; });
        double acc = 0.0;
        for (std::size_t i : cand) {
            if (acc >= node_mass * total) break;
            keep[i] = 1;
            acc += inf[i];
        }
    }

    std::vector<std::size_t> edges;
    for (std::size_t e = 0; e < g.edges.size(); ++e)
        if (keep[g.edges[e].source] && keep[g.edges[e].target]) edges.push_back(e);
    if (edge_mass < 1.0) {
        auto score = [&](std::size_t e) {
            const auto& x = g.edges[e];
            return denom[x.target] > 0.0 ? inf[x.target] * std::fabs(x.weight) / denom[x.target] : 0.0;
        };
        double total = 0.0;
        for (std::size_t e : edges) total += score(e);
        std::stable_sort(edges.begin(), edges.end(), [&](std::size_t a, std::size_t b) { return score(a) > score(b); });
        double acc = 0.0;
        std::size_t n = 0;
        while (n < edges.size() && acc < edge_mass * total) acc += score(edges[n++]);
        edges.resize(n);
        std::sort(edges.begin(), edges.end());
    }

    AttributionGraph out;
    out.prompt = g.prompt;
    out.tokens = g.tokens;
    out.warnings = g.warnings;
    std::vector<std::size_t> remap(N, N);
    for (std::size_t i = 0; i < N; ++i)
        if (keep[i]) {
            remap[i] = out.nodes.size();
            out.nodes.push_back(g.nodes[i]);
        }
    for (std::size_t e : edges)
        out.edges.push_back({remap[g.edges[e].source], remap[g.edges[e].target], g.edges[e].weight});
    out.replacement_score = g.replacement_score;
    out.node_mass = node_mass;
    out.edge_mass = edge_mass;
    out.completeness = completeness(g, out);
    return out;
}

double completeness(const AttributionGraph& full, const AttributionGraph& pruned) {
    const auto denom_full = abs_in_weight(full);
    const double whole = terminal_mass(full, denom_full);
    if (whole == 0.0) return pruned.edges.empty() && full.edges.empty() ? 1.0 : 0.0;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < full.nodes.size(); ++i) index.emplace(full.nodes[i].id(), i);
    std::vector<double> denom(pruned.nodes.size(), 0.0);
    for (std::size_t i = 0; i < pruned.nodes.size(); ++i) {
        const auto it = index.find(pruned.nodes[i].id());
        if (it == index.end()) throw LookupError("pruned graph node " + pruned.nodes[i].id() + " is not in the full graph");
        denom[i] = denom_full[it->second];
    }
    return std::clamp(terminal_mass(pruned, denom) / whole, 0.0, 1.0);
}

// --- interventions -------------------------------------------------------------

EditAction parse_edit_action(const std::string& s) {
    if (s == "set") return EditAction::set;
    if (s == "scale") return EditAction::scale;
    if (s == "ablate") return EditAction::ablate;
    throw InputError("unknown edit action '" + s + "' (expected set, scale or ablate)");
}

InterventionMode parse_intervention_mode(const std::string& s) {
    if (s == "frozen") return InterventionMode::frozen;
    if (s == "propagate") return InterventionMode::propagate;
    throw InputError("unknown intervention mode '" + s + "' (expected frozen or propagate)");
}

namespace {

struct ResolvedEdit {
    std::size_t layer, pos, feature;
    EditAction action;
    double value;
};

double apply_edit(const ResolvedEdit& e, double z) {
    switch (e.action) {
        case EditAction::set: return e.value;
        case EditAction::scale: return z * e.value;
        case EditAction::ablate: return 0.0;
    }
    return z;
}

std::vector<ResolvedEdit> resolve(const std::vector<FeatureEdit>& edits, const LocalReplacement& lr) {
    std::vector<ResolvedEdit> out;
    for (const auto& e : edits) {
        if (e.action != EditAction::ablate && !std::isfinite(e.value))
            throw InputError("edit value must be finite");
        for (const auto& id : e.node_ids) {
            const ParsedId p = parse_id(id);
            if (p.kind != NodeKind::feature) throw LookupError("node '" + id + "' is not a feature");
            if (std::size_t(p.a) >= lr.L || std::size_t(p.b) >= lr.T || std::size_t(p.c) >= lr.F)
                throw LookupError("unknown node id '" + id + "'");
            const std::size_t l = std::size_t(p.a), k = std::size_t(p.b), n = std::size_t(p.c);
            if (e.action != EditAction::set && lr.z[l](k, n) <= 0.0f)
                throw LookupError("feature '" + id + "' is not active on this prompt");
            out.push_back({l, k, n, e.action, e.value});
        }
    }
    return out;
}

// MLP outputs rebuilt from z plus the original error vectors.
std::vector<std::vector<double>> replaced_outputs(const CltModel& clt, const LocalReplacement& lr,
                                                  const std::vector<std::vector<double>>& z) {
    auto m = reconstruct(clt, lr.dec, z, lr.T);
    for (std::size_t l = 0; l < lr.L; ++l)
        for (std::size_t i = 0; i < m[l].size(); ++i) m[l][i] += lr.error[l][i];
    return m;
}

struct RunResult {
    std::vector<std::vector<double>> z;
    std::vector<double> logits;
};

RunResult run_frozen(const CltModel& clt, const HostModel& model, const LocalReplacement& lr,
                     const std::vector<ResolvedEdit>& edits) {
    RunResult r;
    r.z = as_double(lr.z);
    for (const auto& e : edits) {
        double& z = r.z[e.layer][e.pos * lr.F + e.feature];
        z = apply_edit(e, z);
    }
    r.logits = frozen_replay<double>(model, lr.state, replaced_outputs(clt, lr, r.z)).logits;
    return r;
}

// Features re-encoded layer by layer from the replaced forward.
RunResult run_propagate(const CltModel& clt, const HostModel& model, const LocalReplacement& lr,
                        const std::vector<ResolvedEdit>& edits) {
    const std::size_t L = lr.L, d = lr.d, F = lr.F, T = lr.T;
    RunResult r;
    r.z.assign(L, std::vector<double>(T * F, 0.0));
    std::vector<std::vector<double>> m(L, std::vector<double>(T * d, 0.0));
    for (std::size_t l = 0; l < L; ++l) {
        const auto replay = frozen_replay<double>(model, lr.state, m);
        const auto& h = replay.mlp_in[l];
        const auto theta = clt.thresholds(l);
        for (std::size_t k = 0; k < T; ++k)
            for (std::size_t n = 0; n < F; ++n) {
                const float* g = clt.w_enc[l].row(n).data();
                double pre = clt.b_enc[l][n];
                for (std::size_t i = 0; i < d; ++i) pre += static_cast<double>(g[i]) * h[k * d + i] / clt.input_norm[l];
                r.z[l][k * F + n] = pre > theta[n] ? pre : 0.0;
            }
        for (const auto& e : edits)
            if (e.layer == l) {
                double& z = r.z[l][e.pos * F + e.feature];
                z = apply_edit(e, z);
            }
        m[l] = replaced_outputs(clt, lr, r.z)[l];
    }
    r.logits = frozen_replay<double>(model, lr.state, m).logits;
    return r;
}

}  // namespace

void validate_edits(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                    const std::vector<FeatureEdit>& edits) {
    resolve(edits, local_replacement(clt, model, tokens, false));
}

InterventionReport intervene(const CltModel& clt, const HostModel& model, std::span<const TokenId> tokens,
                             const std::vector<FeatureEdit>& edits, InterventionMode mode,
                             const AttributionConfig& cfg) {
    const LocalReplacement lr = local_replacement(clt, model, tokens, cfg.zero_errors);
    const auto resolved = resolve(edits, lr);
    const auto run = mode == InterventionMode::frozen ? run_frozen : run_propagate;
    const RunResult base = run(clt, model, lr, {});
    const RunResult edit = run(clt, model, lr, resolved);
    const std::size_t V = model.config.vocab, T = lr.T, F = lr.F;

    InterventionReport rep;
    rep.mode = mode;
    const std::span<const double> before(&base.logits[(T - 1) * V], V), after(&edit.logits[(T - 1) * V], V);
    for (std::size_t v = 0; v < V; ++v) rep.delta_all.push_back(after[v] - before[v]);
    const auto targets = top_tokens(before, cfg.max_logits);
    for (TokenId t : targets) rep.logits.push_back({t, before[t], after[t], after[t] - before[t]});

    for (std::size_t l = 0; l < lr.L; ++l)
        for (std::size_t i = 0; i < T * F; ++i)
            if (edit.z[l][i] != base.z[l][i]) {
                AttributionNode n;
                n.kind = NodeKind::feature;
                n.layer = static_cast<int>(l);
                n.pos = i / F;
                n.feature = i % F;
                rep.changed_features.push_back({n.id(), base.z[l][i], edit.z[l][i]});
            }
    for (const auto& e : resolved) {
        const auto inj = feature_injections(clt, lr, e.layer, e.pos, e.feature, 1.0);
        const FrozenResponse r = frozen_response(model, lr.state, inj, cfg.path);
        AttributionNode n;
        n.kind = NodeKind::feature;
        n.layer = static_cast<int>(e.layer);
        n.pos = e.pos;
        n.feature = e.feature;
        const double z = edit.z[e.layer][e.pos * F + e.feature];
        rep.edited_effects.push_back({n.id(), targets.empty() ? 0.0 : z * r.logits[(T - 1) * V + targets[0]]});
    }
    return rep;
}

// --- JSON --------------------------------------------------------------------------

std::string graph_to_json(const AttributionGraph& g) {
    using nlohmann::json;
    json j;
    j["schema_version"] = graph_schema_version;
    j["prompt"] = g.prompt;
    j["tokens"] = json::array();
    for (TokenId t : g.tokens) j["tokens"].push_back({{"id", t}, {"text", token_text(t)}});
    j["logit_position"] = g.tokens.empty() ? 0 : g.tokens.size() - 1;
    const auto inf = node_influence(g);
    j["nodes"] = json::array();
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const auto& n = g.nodes[i];
        j["nodes"].push_back({{"id", n.id()},
                              {"kind", node_kind_name(n.kind)},
                              {"layer", n.layer},
                              {"pos", n.pos},
                              {"feature", n.feature},
                              {"token", n.token},
                              {"activation", n.activation},
                              {"probability", n.probability},
                              {"label", n.label},
                              {"influence", inf[i]}});
    }
    j["edges"] = json::array();
    for (const auto& e : g.edges)
        j["edges"].push_back({{"source", g.nodes[e.source].id()}, {"target", g.nodes[e.target].id()}, {"weight", e.weight}});
    j["scores"] = {{"replacement", g.replacement_score}, {"completeness", g.completeness}};
    j["pruning"] = {{"node_mass", g.node_mass}, {"edge_mass", g.edge_mass}};
    j["warnings"] = g.warnings;
    return j.dump();
}

AttributionGraph graph_from_json(const std::string& text) {
    using nlohmann::json;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("graph JSON does not parse: ") + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != graph_schema_version)
            throw InputError("unsupported graph schema version");
        AttributionGraph g;
        g.prompt = j.at("prompt").get<std::string>();
        for (const auto& t : j.at("tokens")) g.tokens.push_back(t.at("id").get<TokenId>());
        std::map<std::string, std::size_t> index;
        for (const auto& n : j.at("nodes")) {
            AttributionNode node;
            const std::string kind = n.at("kind").get<std::string>();
            if (kind == "feature") node.kind = NodeKind::feature;
            else if (kind == "input") node.kind = NodeKind::input;
            else if (kind == "error") node.kind = NodeKind::error;
            else if (kind == "logit") node.kind = NodeKind::logit;
            else throw InputError("unknown node kind '" + kind + "'");
            node.layer = n.at("layer").get<int>();
            node.pos = n.at("pos").get<std::size_t>();
            node.feature = n.at("feature").get<std::size_t>();
            node.token = n.at("token").get<TokenId>();
            node.activation = n.at("activation").get<double>();
            node.probability = n.at("probability").get<double>();
            node.label = n.at("label").get<std::string>();
            const std::string id = n.at("id").get<std::string>();
            if (id != node.id()) throw InputError("node id '" + id + "' disagrees with its fields");
            if (!index.emplace(id, g.nodes.size()).second) throw InputError("duplicate node id '" + id + "'");
            g.nodes.push_back(std::move(node));
        }
        for (const auto& e : j.at("edges")) {
            const auto s = index.find(e.at("source").get<std::string>());
            const auto t = index.find(e.at("target").get<std::string>());
            if (s == index.end() || t == index.end()) throw InputError("edge refers to an unknown node");
            g.edges.push_back({s->second, t->second, e.at("weight").get<double>()});
        }
        g.replacement_score = j.at("scores").at("replacement").get<double>();
        g.completeness = j.at("scores").at("completeness").get<double>();
        g.node_mass = j.at("pruning").at("node_mass").get<double>();
        g.edge_mass = j.at("pruning").at("edge_mass").get<double>();
        g.warnings = j.at("warnings").get<std::vector<std::string>>();
        return g;
    } catch (const json::exception& e) {
        throw InputError(std::string("graph JSON is missing fields: ") + e.what());
    }
}

std::string report_to_json(const InterventionReport& r) {
    using nlohmann::json;
    json j;
    j["mode"] = r.mode == InterventionMode::frozen ? "frozen" : "propagate";
    j["logits"] = json::array();
    for (const auto& l : r.logits)
        j["logits"].push_back({{"token", l.token},
                               {"text", token_text(l.token)},
                               {"before", l.before},
                               {"after", l.after},
                               {"delta", l.delta}});
    j["delta_all"] = r.delta_all;
    j["changed_features"] = json::array();
    for (const auto& c : r.changed_features)
        j["changed_features"].push_back({{"id", c.id}, {"before", c.before}, {"after", c.after}});
    j["edited_effects"] = json::array();
    for (const auto& e : r.edited_effects) j["edited_effects"].push_back({{"id", e.id}, {"logit_effect", e.logit_effect}});
    return j.dump();
}

}  // namespace cltforge
