// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
// fails. The toy workspace built for criterion 2 is reused by the later
// criteria, the way a user runs the stages one after another.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cltforge/activation_cache.hpp"
#include "cltforge/attribution.hpp"
#include "cltforge/autointerp.hpp"
#include "cltforge/clt.hpp"
#include "cltforge/codec.hpp"
#include "cltforge/config.hpp"
#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"
#include "cltforge/host_model.hpp"
#include "cltforge/pipeline.hpp"
#include "cltforge/service.hpp"
#include "cltforge/trainer.hpp"
#include "cltforge/workspace.hpp"
#include "support/attribution_oracle.hpp"
#include "support/autointerp_oracle.hpp"
#include "support/gradcheck.hpp"
#include "support/json_schema.hpp"

using namespace cltforge;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

const fs::path source_dir = CLTFORGE_SOURCE_DIR;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Collects failed checks; a criterion passes when none failed.
struct Checks {
    std::vector<std::string> failed;
    std::vector<std::string> notes;
    void expect(bool ok, const std::string& what) {
        if (!ok) failed.push_back(what);
    }
    void note(const std::string& s) { notes.push_back(s); }
};

struct Criterion {
    int number;
    std::string name;
    double budget_seconds;
    std::function<void(Checks&)> body;
};

// --- shared toy workspace -----------------------------------------------------

struct Toy {
    fs::path root;
    Workspace ws;
    RunConfig cfg;
    double cache_seconds = 0, train_seconds = 0;
    CacheReport cache;
    std::optional<TrainReport> train;
};

Toy& toy() {
    static Toy t = [] {
        Toy x;
        x.root = fs::temp_directory_path() / ("cltforge_acceptance_" + std::to_string(::getpid()));
        fs::remove_all(x.root);
        x.ws = Workspace{x.root};
        x.cfg = parse_config(source_dir / "configs" / "toy.cfg");
        const auto t0 = Clock::now();
        x.cache = run_cache(x.cfg, x.ws);
        x.cache_seconds = seconds_since(t0);
        return x;
    }();
    return t;
}

const TrainReport& toy_trained() {
    Toy& t = toy();
    if (!t.train) {
        const auto t0 = Clock::now();
        t.train = run_train(t.cfg, t.ws, 1);
        t.train_seconds = seconds_since(t0);
    }
    return *t.train;
}

struct ToyModels {
    HostModel host;
    CltModel clt;
    TokenSequence prompt;
};

const ToyModels& toy_models() {
    static const ToyModels m = [] {
        const Toy& t = toy();
        toy_trained();
        ToyModels x;
        x.host = load_host_model(host_model_path(t.cfg, t.ws));
        x.clt = load_clt(t.ws.resolve(t.cfg.clt_path));
        x.prompt = tokenize(t.cfg.prompt, x.host.config.vocab);
        return x;
    }();
    return m;
}

// --- criteria -----------------------------------------------------------------

void parameter_count(Checks& c) {
    const std::uint64_t got = param_count(CltShape{16, 2048, 48}, false);
    c.note("param_count = " + std::to_string(got));
    c.expect(got == 27'380'416'512ull, "param_count(16, 2048, 48) != 27380416512");
    // Independent arithmetic: 136 decoder matrices of d x e*d.
    const std::uint64_t d = 2048, F = 48 * 2048, pairs = 16 * 17 / 2;
    c.expect(got == pairs * d * F, "param_count disagrees with L(L+1)/2 * d * e*d");
}

void quantization(Checks& c) {
    Rng rng(2026);
    const std::size_t d = 16;
    for (QuantMode mode : {QuantMode::int8, QuantMode::int4, QuantMode::int2}) {
        const int M = mode == QuantMode::int8 ? 127 : mode == QuantMode::int4 ? 7 : 1;
        double worst_ratio = 0.0;
        bool scale_ok = true;
        for (int trial = 0; trial < 10'000; ++trial) {
            std::vector<float> x(d);
            const double mag = std::exp(rng.normal() * 2.0);
            for (auto& v : x) v = static_cast<float>(rng.normal() * mag);
            if (trial % 97 == 0) x[rng.below(d)] *= 50.0f;  // outliers
            const auto q = quantize_layer(x, mode);
            float maxabs = 0.0f;
            for (float v : x) maxabs = std::max(maxabs, std::fabs(v));
            scale_ok = scale_ok && q.scale == maxabs / static_cast<float>(M);
            const auto back = dequantize_layer(q.scale, q.q, mode);
            for (std::size_t i = 0; i < d; ++i)
                worst_ratio = std::max(worst_ratio, std::fabs(double(back[i]) - double(x[i])) / double(q.scale));
        }
        c.note(quant_mode_name(mode) + " max |x^-x|/scale = " + fmt("%.6f", worst_ratio));
        c.expect(worst_ratio <= 0.5, quant_mode_name(mode) + " error exceeds scale/2");
        c.expect(scale_ok, quant_mode_name(mode) + " scale is not max|x|/M");
    }

    // Cache sizes on the toy activation dump, same chunking. The fp16 baseline
    // is plain float16 storage; fp16 through zstd is reported alongside.
    Toy& t = toy();
    const HostModel host = load_host_model(host_model_path(t.cfg, t.ws));
    const auto corpus = build_corpus(t.cfg);
    auto size_of = [&](QuantMode mode, Codec codec) {
        CacheConfig cc;
        cc.model_id = t.cfg.model_name;
        cc.quant_mode = mode;
        cc.codec = codec;
        cc.codec_level = static_cast<int>(t.cfg.codec_level);
        cc.tokens_per_chunk = static_cast<std::size_t>(t.cfg.tokens_per_chunk);
        cc.norm_batches = static_cast<std::size_t>(t.cfg.norm_batches);
        cc.norm_batch_tokens = static_cast<std::size_t>(t.cfg.norm_batch_tokens);
        const fs::path dir = t.root / ("cache_" + quant_mode_name(mode) + "_" + codec_name(codec));
        write_cache(host, corpus, cc, dir);
        const auto bytes = ActivationCache(dir).stored_bytes();
        fs::remove_all(dir);
        return double(bytes);
    };
    const Codec codec = parse_codec(t.cfg.codec);
    const double fp16 = size_of(QuantMode::fp16, Codec::none);
    const double fp16_zstd = size_of(QuantMode::fp16, codec);
    const double int8 = double(t.cache.stored_bytes);
    const double ratio = fp16 / int8;
    c.note("int8 cache " + fmt("%.0f", int8) + " B, fp16 baseline " + fmt("%.0f", fp16) + " B: " + fmt("%.2fx", ratio) +
           " smaller (" + fmt("%.2fx", fp16_zstd / int8) + " vs fp16 through " + codec_name(codec) + ")");
    for (QuantMode mode : {QuantMode::int4, QuantMode::int2})
        c.note(quant_mode_name(mode) + " cache " + fmt("%.2fx", fp16 / size_of(mode, codec)) + " smaller");
    c.expect(ratio >= 2.0, "int8 cache is less than 2x smaller than the fp16 baseline");
}

void gradients(Checks& c) {
    const auto gc = oracle::make_gradcheck_case(2, 8, 2, 6);
    const auto rep = oracle::run_gradcheck(gc);
    for (const char* cls : {"encoder", "decoder", "encoder_bias", "decoder_bias", "log_threshold"}) {
        const auto it = rep.rel_error.find(cls);
        if (it == rep.rel_error.end()) {
            c.expect(false, std::string(cls) + " not checked");
            continue;
        }
        c.note(std::string(cls) + " rel " + fmt("%.2e", it->second));
        c.expect(rep.fd_norm.at(cls) > 0.0, std::string(cls) + " has a zero finite-difference gradient");
        c.expect(it->second <= 1e-3, std::string(cls) + " relative error above 1e-3");
    }
}

void sharding(Checks& c) {
    Toy& t = toy();
    auto run = [&](std::size_t workers) {
        RunConfig cfg = t.cfg;
        cfg.total_training_tokens = 500 * cfg.train_batch_size_tokens * cfg.gradient_accumulation_steps;
        cfg.lr_decay_steps = 100;
        cfg.l0_warm_up_steps = 250;
        cfg.checkpoint_l0.clear();
        cfg.run_name = "shard_w" + std::to_string(workers);
        cfg.checkpoint_path = "checkpoints_w" + std::to_string(workers);
        const auto rep = run_train(cfg, t.ws, workers);
        std::vector<double> loss;
        std::ifstream in(rep.metrics_path);
        for (std::string line; std::getline(in, line);) loss.push_back(json::parse(line).at("loss").get<double>());
        return std::make_pair(loss, load_clt(rep.final_checkpoint));
    };
    const auto [l1, m1] = run(1);
    const auto [l4, m4] = run(4);
    c.expect(l1.size() == 500 && l4.size() == 500, "expected 500 logged steps");
    double worst_loss = 0.0;
    for (std::size_t i = 0; i < std::min(l1.size(), l4.size()); ++i)
        worst_loss = std::max(worst_loss, std::fabs(l4[i] - l1[i]) / std::max(std::fabs(l1[i]), 1e-30));
    double worst_w = 0.0;
    std::vector<std::span<float>> a, b;
    const_cast<CltModel&>(m1).for_each_param([&](std::span<float> s) { a.push_back(s); });
    const_cast<CltModel&>(m4).for_each_param([&](std::span<float> s) { b.push_back(s); });
    c.expect(a.size() == b.size(), "parameter layouts differ");
    for (std::size_t k = 0; k < std::min(a.size(), b.size()); ++k)
        for (std::size_t i = 0; i < a[k].size(); ++i)
            worst_w = std::max(worst_w, std::fabs(double(a[k][i]) - double(b[k][i])));
    c.note("max rel loss diff " + fmt("%.2e", worst_loss) + ", max abs weight diff " + fmt("%.2e", worst_w) +
           (m1 == m4 ? " (bitwise equal)" : ""));
    c.expect(worst_loss <= 1e-5, "per-step loss differs by more than 1e-5 relative");
    c.expect(worst_w <= 1e-4, "final weights differ by more than 1e-4");
}

void toy_training(Checks& c) {
    const TrainReport& rep = toy_trained();
    const Toy& t = toy();
    double mean_l0 = 0.0;
    for (double v : rep.l0) mean_l0 += v;
    mean_l0 /= std::max<std::size_t>(1, rep.l0.size());
    c.note("explained variance " + fmt("%.4f", rep.explained_variance) + ", mean L0 " + fmt("%.2f", mean_l0) + ", " +
           std::to_string(rep.steps) + " steps in " + fmt("%.1f s", t.train_seconds));
    c.expect(t.cfg.n_layers == 2 && t.cfg.d_in == 16 && t.cfg.expansion_factor == 8, "toy config is not L=2, d=16, e=8");
    c.expect(rep.steps == 5000, "expected 5000 steps");
    c.expect(rep.explained_variance >= 0.75, "explained variance below 0.75");
    c.expect(mean_l0 <= 10.0, "mean per-layer L0 above 10");
    c.expect(t.train_seconds < 300.0, "training took 5 minutes or more");

    const auto step_schema = test_support::JsonSchema::load(source_dir / "docs/schemas/metric_step.schema.json");
    std::ifstream in(rep.metrics_path);
    std::size_t n = 0, bad_schema = 0, bad_lambda = 0;
    const double coeff = t.cfg.l0_coefficient, warm = double(t.cfg.l0_warm_up_steps);
    double prev = -1.0;
    bool shape_ok = true;
    for (std::string line; std::getline(in, line);) {
        const json j = json::parse(line);
        ++n;
        if (!step_schema.valid(j)) ++bad_schema;
        for (const char* k : {"l0", "lambda0", "dead_features", "explained_variance"})
            if (!j.contains(k)) ++bad_schema;
        const double step = j.at("step").get<double>();
        const double want = coeff * std::min(1.0, step / warm);
        const double got = j.at("lambda0").get<double>();
        if (std::fabs(got - want) > 1e-6 * coeff) ++bad_lambda;
        // Strictly rising during warm-up, flat afterwards.
        if (step <= warm ? !(got > prev) : got != prev && step > warm + 1) shape_ok = false;
        prev = got;
    }
    c.note(std::to_string(n) + " metric lines");
    c.expect(n == rep.steps, "metric log does not have one line per step");
    c.expect(bad_schema == 0, std::to_string(bad_schema) + " metric lines miss a series or fail the schema");
    c.expect(bad_lambda == 0, std::to_string(bad_lambda) + " lambda0 values off the linear-then-plateau schedule");
    c.expect(shape_ok, "lambda0 trace is not a linear increase with a final plateau");
}

void attribution_fidelity(Checks& c) {
    const ToyModels& m = toy_models();
    const AttributionConfig ac = attribution_config(toy().cfg);
    const AttributionGraph g = build_graph(m.clt, m.host, m.prompt, ac);
    const oracle::FrozenPathFd fd(m.host, m.clt, m.prompt);
    double worst = 0.0;
    std::size_t bad = 0;
    for (const auto& e : g.edges) {
        const double ref = fd.response(g.nodes[e.source], g.nodes[e.target]);
        const double err = std::fabs(e.weight - ref);
        worst = std::max(worst, err / std::max(std::fabs(ref), 1e-300));
        if (err > 1e-4 * std::fabs(ref)) ++bad;
    }
    c.note(std::to_string(g.edges.size()) + " edges, max rel error vs finite differences " + fmt("%.2e", worst));
    c.expect(!g.edges.empty(), "graph has no edges");
    c.expect(bad == 0, std::to_string(bad) + " edges off their finite-difference response by more than 1e-4 relative");

    std::size_t logit_edges = 0, bad_ablation = 0;
    double worst_ablation = 0.0;
    for (const auto& e : g.edges) {
        const auto& s = g.nodes[e.source];
        const auto& t = g.nodes[e.target];
        if (s.kind != NodeKind::feature || t.kind != NodeKind::logit) continue;
        ++logit_edges;
        const auto rep = intervene(m.clt, m.host, m.prompt, {FeatureEdit{{s.id()}, EditAction::ablate, 0.0}},
                                   InterventionMode::frozen, ac);
        const double delta = rep.delta_all.at(t.token);
        worst_ablation = std::max(worst_ablation, std::fabs(delta + e.weight));
        if (std::fabs(delta + e.weight) > 1e-4) ++bad_ablation;
    }
    c.note(std::to_string(logit_edges) + " feature->logit ablations, max |delta + weight| " + fmt("%.2e", worst_ablation));
    c.expect(logit_edges > 0, "no feature->logit edges to ablate");
    c.expect(bad_ablation == 0, std::to_string(bad_ablation) + " ablations off -weight by more than 1e-4");
}

void graph_metrics(Checks& c) {
    const ToyModels& m = toy_models();
    AttributionConfig ac = attribution_config(toy().cfg);
    const AttributionGraph g = build_graph(m.clt, m.host, m.prompt, ac);
    c.note("replacement " + fmt("%.4f", g.replacement_score));

    AttributionConfig zero_err = ac;
    zero_err.zero_errors = true;
    const double r1 = build_graph(m.clt, m.host, m.prompt, zero_err).replacement_score;
    c.expect(r1 == 1.0, "replacement score with zero errors is " + fmt("%.17g", r1));

    CltModel no_dec = m.clt;
    for (auto& w : no_dec.w_dec) std::fill(w.storage().begin(), w.storage().end(), 0.0f);
    no_dec.adapter.reset();
    const double r0 = build_graph(no_dec, m.host, m.prompt, ac).replacement_score;
    c.expect(r0 == 0.0, "replacement score with zero decoders is " + fmt("%.17g", r0));

    const double full = prune(g, 1.0, 1.0).completeness;
    c.expect(full == 1.0, "completeness after prune(1, 1) is " + fmt("%.17g", full));
    double prev = -1.0;
    std::string trace;
    for (double pn : {0.5, 0.8, 1.0}) {
        const double comp = prune(g, pn, 1.0).completeness;
        trace += fmt(" %.4f", comp);
        c.expect(comp >= prev, "completeness drops at p_n = " + fmt("%.1f", pn));
        prev = comp;
    }
    c.note("completeness over p_n {0.5, 0.8, 1.0}:" + trace);
}

void autointerp_oracle(Checks& c) {
    const ToyModels& m = toy_models();
    const RunConfig& cfg = toy().cfg;
    AutointerpConfig ac;
    ac.top_k = static_cast<std::size_t>(cfg.autointerp_top_k);
    ac.window_before = static_cast<std::size_t>(cfg.autointerp_window_before);
    ac.window_after = static_cast<std::size_t>(cfg.autointerp_window_after);
    ac.total_tokens = 100'000;
    ac.batch_tokens = static_cast<std::size_t>(cfg.train_batch_size_tokens);
    const auto corpus = build_corpus(cfg);

    // The trained CLT, plus a copy whose feature 0 at layer 0 is exactly 1
    // everywhere so every example ties.
    CltModel tied = m.clt;
    std::fill(tied.w_enc[0].row(0).begin(), tied.w_enc[0].row(0).end(), 0.0f);
    tied.b_enc[0][0] = 1.0f;
    tied.log_threshold[0][0] = std::log(0.5f);
    for (const CltModel* clt : {&m.clt, static_cast<const CltModel*>(&tied)}) {
        const std::string tag = clt == &tied ? "tied" : "trained";
        ac.num_workers = 1;
        const FeatureStore one = merge(scan(*clt, m.host, corpus, ac));
        ac.num_workers = 4;
        auto parts = scan(*clt, m.host, corpus, ac);
        c.expect(parts.size() == 4, tag + ": expected 4 worker stores");
        const FeatureStore four = merge(std::move(parts));
        c.expect(four.records == one.records, tag + ": 4-worker merge differs from 1 worker");
        check_coverage(four, clt->shape);

        const auto ref = oracle::brute_force(*clt, m.host, corpus, ac.total_tokens, ac.top_k, ac.window_before,
                                             ac.window_after);
        c.expect(one.manifest.tokens_scanned == ref.tokens, tag + ": scanned token count differs");
        c.expect(ref.tokens <= 100'000 && ref.tokens + cfg.context_size > 100'000, tag + ": stream is not 100k tokens");
        std::size_t mismatched = 0, active = 0;
        for (const auto& [key, bf] : ref.features) {
            const auto it = one.records.find(key);
            if (it == one.records.end() || it->second.top != bf.top ||
                it->second.active_count != bf.active_values.size())
                ++mismatched;
            if (!bf.top.empty()) ++active;
        }
        c.note(tag + ": " + std::to_string(ref.tokens) + " tokens, " + std::to_string(active) + " active features of " +
               std::to_string(ref.features.size()));
        c.expect(mismatched == 0, tag + ": " + std::to_string(mismatched) + " records differ from the full-sort oracle");
        if (clt == &tied) {
            const auto& top = one.records.at({0, 0}).top;
            bool order = top.size() == ac.top_k;
            for (std::size_t i = 0; order && i < top.size(); ++i)
                order = top[i].sequence_id == i && top[i].peak_position == 0;
            c.expect(order, "tied feature does not resolve to the earliest sequences and positions");
        }
    }
}

void end_to_end(Checks& c) {
    const auto schemas = [] {
        std::map<std::string, test_support::JsonSchema> s;
        for (const auto& e : fs::directory_iterator(source_dir / "docs" / "schemas")) {
            const std::string name = e.path().filename().string();
            s.emplace(name.substr(0, name.find('.')), test_support::JsonSchema::load(e.path()));
        }
        return s;
    }();
    std::size_t validated = 0;
    auto validate = [&](const std::string& schema, const json& doc, const std::string& what) {
        const auto errs = schemas.at(schema).errors(doc);
        ++validated;
        c.expect(errs.empty(), what + " fails " + schema + (errs.empty() ? "" : ": " + errs.front()));
    };

    Toy& t = toy();
    toy_trained();
    double total = t.cache_seconds + t.train_seconds;
    auto t0 = Clock::now();
    const auto ai = run_autointerp(t.cfg, t.ws, 4);
    const auto at = run_attribute(t.cfg, t.ws);
    total += seconds_since(t0);
    c.expect(ai.records == std::size_t(t.cfg.n_layers * t.cfg.d_in * t.cfg.expansion_factor), "feature store does not cover the CLT");

    t0 = Clock::now();
    {
        ApiServer server(t.ws, t.cfg);
        const int port = server.start("127.0.0.1", 0);
        httplib::Client cl("127.0.0.1", port);
        cl.set_read_timeout(120, 0);
        auto get = [&](const std::string& path, const std::string& schema, int status = 200) {
            const auto r = cl.Get(path);
            c.expect(r && r->status == status, "GET " + path + " status");
            if (!r) return json();
            const json j = json::parse(r->body, nullptr, false);
            validate(schema, j, "GET " + path);
            return j;
        };
        auto post = [&](const std::string& path, const json& body, const std::string& schema, int status) {
            const auto r = cl.Post(path, body.dump(), "application/json");
            c.expect(r && r->status == status, "POST " + path + " status");
            if (!r) return json();
            const json j = json::parse(r->body, nullptr, false);
            validate(schema, j, "POST " + path);
            return j;
        };
        const std::string gp = "/api/graphs/" + at.graph_id;
        const json list = get("/api/graphs", "graph_list");
        c.expect(list["graphs"].size() == 1, "graph list does not hold the attributed graph");
        const json g = get(gp, "graph");
        get("/api/graphs/unknown", "error", 404);
        const json pruned = post(gp + "/prune", {{"p_n", 0.5}, {"p_e", 0.9}}, "graph", 200);
        c.expect(pruned["nodes"].size() <= g["nodes"].size(), "re-pruned graph grew");
        std::string feature;
        for (const auto& n : g["nodes"])
            if (n["kind"] == "feature") {
                feature = n["id"];
                break;
            }
        c.expect(!feature.empty(), "graph has no feature node");
        const json sub = post(gp + "/interventions", {{"edits", {{{"node_id", feature}, {"action", "ablate"}}}}},
                              "job_submission", 202);
        json job;
        for (int i = 0; i < 6000; ++i) {
            job = get("/api/jobs/" + sub.value("job_id", ""), "job");
            if (job.value("status", "") == "done" || job.value("status", "") == "failed") break;
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        c.expect(job.value("status", "") == "done", "intervention job did not complete");
        if (job.contains("result")) validate("intervention_report", job["result"], "intervention result");
        const std::size_t layer = std::stoul(feature.substr(2, feature.find(':', 2) - 2));
        const std::size_t index = std::stoul(feature.substr(feature.rfind(':') + 1));
        get("/api/features/" + std::to_string(layer) + "/" + std::to_string(index), "feature_record");
        post("/api/clusters", {{"graph_id", at.graph_id}, {"node_ids", {feature}}, {"label", "e2e"}}, "clusters", 201);
        get("/api/clusters?graph_id=" + at.graph_id, "clusters");
        server.stop();
    }
    total += seconds_since(t0);

    // Every JSON artifact left in the workspace.
    for (const auto& e : fs::directory_iterator(t.ws.graphs())) {
        const std::string name = e.path().filename().string();
        const json j = json::parse(slurp(e.path()));
        validate(name.find(".clusters.") != std::string::npos ? "cluster_file" : "graph", j, name);
    }
    for (const auto& e : fs::directory_iterator(t.ws.jobs())) {
        const std::string name = e.path().filename().string();
        const json j = json::parse(slurp(e.path()));
        if (name.find(".result.") != std::string::npos) {
            if (j.contains("mode")) validate("intervention_report", j, name);
            else if (j.contains("nodes")) validate("graph", j, name);
        } else {
            validate("job", j, name);
        }
    }
    validate("run_summary", json::parse(slurp(toy_trained().summary_path)), "run summary");
    std::ifstream in(toy_trained().metrics_path);
    std::string first;
    std::getline(in, first);
    validate("metric_step", json::parse(first), "metric log");
    const FeatureStore store = load_store(ai.store_path);
    for (const auto& [key, rec] : store.records)
        if (key.feature % 64 == 0) validate("feature_record", json::parse(record_to_json(rec)), "feature record");

    c.note("cache " + fmt("%.1f", t.cache_seconds) + " s, train " + fmt("%.1f", t.train_seconds) + " s, chain " +
           fmt("%.1f", total) + " s; " + std::to_string(validated) + " JSON documents validated");
    c.expect(total < 300.0, "end-to-end chain took 5 minutes or more");
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "parameter count", 0.001, parameter_count},
        {2, "quantization", 30, quantization},
        {3, "gradient correctness", 60, gradients},
        {4, "sharding equivalence", 120, sharding},
        {5, "toy training", 300, toy_training},
        {6, "attribution fidelity", 60, attribution_fidelity},
        {7, "graph metrics", 60, graph_metrics},
        {8, "autointerp oracle", 120, autointerp_oracle},
        {9, "end-to-end smoke", 300, end_to_end},
    };
    int failures = 0;
    for (const auto& cr : criteria) {
        Checks c;
        const auto t0 = Clock::now();
        try {
            cr.body(c);
        } catch (const std::exception& e) {
            c.failed.push_back(std::string("exception: ") + e.what());
        }
        const double secs = seconds_since(t0);
        // Criterion 5 reports its own training time; shared setup is not billed to the first user.
        if (cr.number != 5 && cr.number != 9 && secs > cr.budget_seconds)
            c.failed.push_back("took " + fmt("%.1f s", secs) + ", budget " + fmt("%.0f s", cr.budget_seconds));
        const bool pass = c.failed.empty();
        failures += !pass;
        std::string detail;
        for (const auto& n : c.notes) detail += (detail.empty() ? "" : "; ") + n;
        std::printf("criterion %d %-22s %s  (%.2f s) %s\n", cr.number, cr.name.c_str(), pass ? "PASS" : "FAIL", secs,
                    detail.c_str());
        for (const auto& f : c.failed) std::printf("    failed: %s\n", f.c_str());
        std::fflush(stdout);
    }
    std::error_code ec;
    fs::remove_all(toy().root, ec);
    std::printf("%d of %zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
