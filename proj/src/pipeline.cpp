// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <memory>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "cltforge/binary_io.hpp"
#include "cltforge/codec.hpp"
#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"

namespace cltforge {

namespace {

namespace fs = std::filesystem;

void say(const Logger& log, const std::string& msg) {
    if (log) log(msg);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

void check_supported(const RunConfig& cfg) {
    if (cfg.model_name != "toy-host")
        throw ConfigError("model_name '" + cfg.model_name + "' is not available; this build ships the 'toy-host' model");
    if (cfg.dataset_path != "synthetic")
        throw ConfigError("dataset_path '" + cfg.dataset_path + "' is not available; use 'synthetic'");
}

ShardMode shard_mode(const RunConfig& cfg) {
    return cfg.distributed_setup == "feature_sharding" ? ShardMode::feature_sharding : ShardMode::data_parallel;
}

std::shared_ptr<const ActivationCache> open_cache(const RunConfig& cfg, const Workspace& ws) {
    const fs::path dir = cache_dir(cfg, ws);
    require_artifact(dir / "header.cltc", "clt-forge cache");
    return std::make_shared<const ActivationCache>(dir);
}

CltModel load_trained(const RunConfig& cfg, const Workspace& ws) {
    const fs::path p = ws.resolve(cfg.clt_path);
    require_artifact(p, "clt-forge train");
    return load_clt(p);
}

HostModel load_host(const RunConfig& cfg, const Workspace& ws) {
    const fs::path p = host_model_path(cfg, ws);
    require_artifact(p, "clt-forge cache");
    return load_host_model(p);
}

TrainConfig base_train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.loss.l0_coefficient = static_cast<float>(cfg.l0_coefficient);
    t.loss.l0_warm_up_steps = static_cast<std::size_t>(cfg.l0_warm_up_steps);
    t.loss.dead_penalty_coef = static_cast<float>(cfg.dead_penalty_coef);
    t.loss.dead_feature_window = static_cast<std::size_t>(cfg.dead_feature_window);
    t.schedule.lr = static_cast<float>(cfg.lr);
    t.schedule.lr_warm_up_steps = static_cast<std::size_t>(cfg.lr_warm_up_steps);
    t.schedule.lr_decay_steps = static_cast<std::size_t>(cfg.lr_decay_steps);
    t.schedule.total_steps = cfg.total_training_steps();
    t.adam_beta1 = static_cast<float>(cfg.adam_beta1);
    t.adam_beta2 = static_cast<float>(cfg.adam_beta2);
    t.batch_tokens = static_cast<std::size_t>(cfg.train_batch_size_tokens);
    t.gradient_accumulation_steps = static_cast<std::size_t>(cfg.gradient_accumulation_steps);
    t.shuffle_buffer_tokens = static_cast<std::size_t>(cfg.n_train_batch_per_buffer * cfg.train_batch_size_tokens);
    t.seed = static_cast<std::uint64_t>(cfg.seed);
    return t;
}

// Explained variance and L0 on the first chunks of the cache.
void evaluate(const CltModel& clt, const std::shared_ptr<const ActivationCache>& cache, TrainReport& rep) {
    ChunkStream stream(cache, 0, 1, ReadMode::broadcast);
    const auto batches = collect_batches(stream, 16);
    rep.explained_variance = explained_variance(clt, batches).total;
    rep.l0 = measure_l0(clt, batches);
}

void write_summary(const TrainReport& rep, const RunConfig& cfg, double seconds, const std::string& stage) {
    nlohmann::json j;
    j["stage"] = stage;
    j["steps"] = rep.steps;
    j["seconds"] = seconds;
    j["explained_variance"] = rep.explained_variance;
    j["l0"] = rep.l0;
    j["final_checkpoint"] = rep.final_checkpoint.string();
    j["selected_checkpoint"] = rep.selected_checkpoint.string();
    j["metrics"] = rep.metrics_path.string();
    std::vector<std::string> cps;
    for (const auto& c : rep.checkpoints) cps.push_back(c.string());
    j["checkpoints"] = cps;
    j["config"] = serialize_config(cfg);
    write_text_atomic(rep.summary_path, j.dump(2));
}

std::string run_label(const RunConfig& cfg, const std::string& fallback) {
    return cfg.run_name ? *cfg.run_name : fallback;
}

}  // namespace

std::vector<TokenSequence> build_corpus(const RunConfig& cfg) {
    Rng rng(static_cast<std::uint64_t>(cfg.seed));
    CorpusSpec spec;
    spec.num_sequences = static_cast<std::size_t>(cfg.corpus_sequences);
    spec.seq_len = static_cast<std::size_t>(cfg.context_size);
    spec.vocab = static_cast<std::size_t>(cfg.vocab_size);
    return make_synthetic_corpus(rng, spec);
}

HostConfig host_config(const RunConfig& cfg) {
    HostConfig h;
    h.num_layers = static_cast<std::size_t>(cfg.n_layers);
    h.d_model = static_cast<std::size_t>(cfg.d_in);
    h.d_mlp = static_cast<std::size_t>(cfg.d_mlp);
    h.vocab = static_cast<std::size_t>(cfg.vocab_size);
    h.context = static_cast<std::size_t>(cfg.context_size);
    return h;
}

fs::path cache_dir(const RunConfig& cfg, const Workspace& ws) { return ws.resolve(cfg.cached_activations_path); }
fs::path host_model_path(const RunConfig& cfg, const Workspace& ws) { return cache_dir(cfg, ws) / "host.cltm"; }
fs::path feature_store_path(const RunConfig& cfg, const Workspace& ws) {
    return ws.resolve(cfg.latent_cache_path) / "features.cltf";
}

void require_artifact(const fs::path& path, std::string_view producer) {
    if (!fs::exists(path))
        throw StateError("missing prerequisite " + path.string() + " (produced by `" + std::string(producer) + "`)");
}

CacheReport run_cache(const RunConfig& cfg, const Workspace& ws, const Logger& log) {
    cfg.validate();
    check_supported(cfg);
    ws.ensure();
    const auto corpus = build_corpus(cfg);
    Rng rng(static_cast<std::uint64_t>(cfg.seed) + 1);
    HostTrainConfig htc;
    htc.steps = static_cast<std::size_t>(cfg.host_train_steps);
    htc.seed = static_cast<std::uint64_t>(cfg.seed) + 2;
    const std::size_t head = std::min(corpus.size(), static_cast<std::size_t>(cfg.host_train_sequences));
    say(log, "training host model on " + std::to_string(head) + " sequences for " + std::to_string(htc.steps) + " steps");
    auto host = train_host_model(HostModel::random(host_config(cfg), rng), std::span(corpus).first(head), htc);

    CacheReport rep;
    rep.host_loss = host.loss_history.empty() ? 0.0 : host.loss_history.back();
    rep.dir = cache_dir(cfg, ws);
    fs::create_directories(rep.dir);
    save_host_model(host.model, host_model_path(cfg, ws));
    CacheConfig cc;
    cc.model_id = cfg.model_name;
    cc.quant_mode = parse_quant_mode(cfg.quant_mode);
    cc.codec = parse_codec(cfg.codec);
    cc.codec_level = static_cast<int>(cfg.codec_level);
    cc.tokens_per_chunk = static_cast<std::size_t>(cfg.tokens_per_chunk);
    cc.norm_batches = static_cast<std::size_t>(cfg.norm_batches);
    cc.norm_batch_tokens = static_cast<std::size_t>(cfg.norm_batch_tokens);
    say(log, "caching " + std::to_string(corpus.size()) + " sequences into " + rep.dir.string());
    rep.header = write_cache(host.model, corpus, cc, rep.dir);
    rep.stored_bytes = ActivationCache(rep.dir).stored_bytes();
    say(log, "cache: " + std::to_string(rep.header.total_tokens) + " tokens, " + std::to_string(rep.header.num_chunks) +
                 " chunks, " + std::to_string(rep.stored_bytes) + " bytes");
    return rep;
}

TrainReport run_train(const RunConfig& cfg, const Workspace& ws, std::size_t num_workers, const Logger& log) {
    cfg.validate();
    ws.ensure();
    const auto t0 = std::chrono::steady_clock::now();
    const auto cache = open_cache(cfg, ws);
    const CltShape shape{static_cast<std::size_t>(cfg.n_layers), static_cast<std::size_t>(cfg.d_in),
                         static_cast<std::size_t>(cfg.expansion_factor)};
    if (cache->header().num_layers != shape.num_layers || cache->header().d_model != shape.d_model)
        throw ConfigError("cache holds " + std::to_string(cache->header().num_layers) + " layers of width " +
                          std::to_string(cache->header().d_model) + " but the config asks for n_layers=" +
                          std::to_string(shape.num_layers) + ", d_in=" + std::to_string(shape.d_model));
    CltModel clt;
    if (cfg.from_pretrained_path) {
        const fs::path p = ws.resolve(*cfg.from_pretrained_path);
        require_artifact(p, "clt-forge train");
        clt = load_clt(p);
    } else {
        Rng rng(static_cast<std::uint64_t>(cfg.seed) + 3);
        CltInit init;
        init.threshold = static_cast<float>(cfg.jumprelu_init_threshold);
        init.bandwidth = static_cast<float>(cfg.jumprelu_bandwidth);
        clt = CltModel::random(shape, rng, init);
    }
    clt.input_norm = cache->header().input_norm;
    clt.output_norm = cache->header().output_norm;

    TrainConfig t = base_train_config(cfg);
    t.checkpoint_l0 = cfg.checkpoint_l0;
    t.checkpoint_dir = ws.resolve(cfg.checkpoint_path);
    const std::string label = run_label(cfg, "train");
    t.metrics_path = ws.metrics() / (label + ".jsonl");
    const auto plan = ShardPlan::make(shard_mode(cfg), num_workers, shape.d_features());
    say(log, "training " + std::to_string(t.schedule.total_steps) + " steps, " + shard_mode_name(plan.mode) + " x" +
                 std::to_string(num_workers));
    TrainResult res = train(std::move(clt), cache_source_factory(cache), t, plan);

    TrainReport rep;
    rep.steps = res.log.size();
    rep.checkpoints = res.checkpoints;
    rep.final_checkpoint = t.checkpoint_dir / "clt_final.clt";
    rep.selected_checkpoint = rep.final_checkpoint;
    if (cfg.optimal_l0) {
        std::ostringstream name;
        name << "clt_l0_" << *cfg.optimal_l0 << ".clt";
        if (fs::exists(t.checkpoint_dir / name.str())) rep.selected_checkpoint = t.checkpoint_dir / name.str();
    }
    rep.metrics_path = t.metrics_path;
    rep.summary_path = ws.metrics() / (label + "_summary.json");
    evaluate(res.model, cache, rep);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_summary(rep, cfg, secs, "train");
    say(log, "explained variance " + fmt("%.4f", rep.explained_variance) + ", L0 per layer " +
                 [&] {
                     std::string s;
                     for (double v : rep.l0) s += fmt("%.2f ", v);
                     return s;
                 }() +
                 "(" + fmt("%.1f", secs) + " s)");
    return rep;
}

TrainReport run_finetune(const RunConfig& cfg, const Workspace& ws, std::size_t num_workers, const Logger& log) {
    cfg.validate();
    ws.ensure();
    const auto t0 = std::chrono::steady_clock::now();
    const auto cache = open_cache(cfg, ws);
    CltModel clt = load_trained(cfg, ws);
    Rng rng(static_cast<std::uint64_t>(cfg.seed) + 4);
    attach_adapter(clt, static_cast<std::size_t>(cfg.finetune_rank), rng);

    TrainConfig t = base_train_config(cfg);
    t.adapter_only = true;
    t.schedule.lr = static_cast<float>(cfg.finetune_lr);
    t.schedule.total_steps = static_cast<std::size_t>(cfg.finetune_steps);
    t.schedule.lr_warm_up_steps = std::min<std::size_t>(t.schedule.lr_warm_up_steps, t.schedule.total_steps / 10);
    t.schedule.lr_decay_steps = std::min<std::size_t>(t.schedule.lr_decay_steps, t.schedule.total_steps / 5);
    t.loss.l0_warm_up_steps = 0;
    const std::string label = run_label(cfg, "finetune");
    t.metrics_path = ws.metrics() / (label + ".jsonl");
    const auto plan = ShardPlan::make(shard_mode(cfg), num_workers, clt.shape.d_features());
    say(log, "finetuning a rank-" + std::to_string(cfg.finetune_rank) + " decoder adapter for " +
                 std::to_string(t.schedule.total_steps) + " steps");
    TrainResult res = train(std::move(clt), cache_source_factory(cache), t, plan);
    merge_adapter(res.model);

    TrainReport rep;
    rep.steps = res.log.size();
    rep.final_checkpoint = ws.resolve(cfg.checkpoint_path) / "clt_finetuned.clt";
    fs::create_directories(rep.final_checkpoint.parent_path());
    save_clt(res.model, rep.final_checkpoint);
    rep.selected_checkpoint = rep.final_checkpoint;
    rep.checkpoints = {rep.final_checkpoint};
    rep.metrics_path = t.metrics_path;
    rep.summary_path = ws.metrics() / (label + "_summary.json");
    evaluate(res.model, cache, rep);
    write_summary(rep, cfg, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), "finetune");
    say(log, "finetuned explained variance " + fmt("%.4f", rep.explained_variance));
    return rep;
}

AutointerpReport run_autointerp(const RunConfig& cfg, const Workspace& ws, std::size_t num_workers, const Logger& log) {
    cfg.validate();
    ws.ensure();
    const HostModel host = load_host(cfg, ws);
    const CltModel clt = load_trained(cfg, ws);
    const auto corpus = build_corpus(cfg);
    AutointerpConfig ac;
    ac.top_k = static_cast<std::size_t>(cfg.autointerp_top_k);
    ac.window_before = static_cast<std::size_t>(cfg.autointerp_window_before);
    ac.window_after = static_cast<std::size_t>(cfg.autointerp_window_after);
    ac.total_tokens = static_cast<std::size_t>(cfg.total_autointerp_tokens);
    ac.num_workers = num_workers;
    ac.batch_tokens = static_cast<std::size_t>(cfg.train_batch_size_tokens);
    say(log, "scanning up to " + std::to_string(ac.total_tokens) + " tokens with " + std::to_string(num_workers) +
                 " workers");
    auto stores = scan(clt, host, corpus, ac);

    AutointerpReport rep;
    const fs::path dir = ws.resolve(cfg.latent_cache_path);
    fs::create_directories(dir);
    for (std::size_t w = 0; w < stores.size(); ++w) {
        const fs::path p = dir / ("worker_" + std::to_string(w) + ".cltf");
        save_store(stores[w], p);
        rep.worker_stores.push_back(p);
    }
    FeatureStore merged = merge(std::move(stores));
    check_coverage(merged, clt.shape);
    std::unique_ptr<Explainer> gen;
    if (cfg.explainer_url) gen = std::make_unique<HttpExplainer>(*cfg.explainer_url);
    else gen = std::make_unique<TemplateExplainer>();
    explain_all(merged, *gen);
    rep.store_path = feature_store_path(cfg, ws);
    save_store(merged, rep.store_path);
    rep.tokens_scanned = merged.manifest.tokens_scanned;
    rep.records = merged.records.size();
    say(log, "wrote " + std::to_string(rep.records) + " feature records to " + rep.store_path.string());
    return rep;
}

AttributionConfig attribution_config(const RunConfig& cfg) {
    AttributionConfig a;
    a.max_logits = static_cast<std::size_t>(cfg.max_logits);
    a.path = cfg.jacobian_path == "through_mlps" ? JacobianPath::through_mlps : JacobianPath::direct;
    a.node_mass = cfg.node_mass;
    a.edge_mass = cfg.edge_mass;
    return a;
}

std::string graph_id_for(const std::string& prompt, const std::string& clt_path) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "g%012llx",
                  static_cast<unsigned long long>(fnv1a64(prompt + "\n" + clt_path) & 0xffffffffffffull));
    return buf;
}

AttributeReport run_attribute(const RunConfig& cfg, const Workspace& ws, const std::optional<std::string>& prompt,
                              const Logger& log) {
    cfg.validate();
    ws.ensure();
    const HostModel host = load_host(cfg, ws);
    const CltModel clt = load_trained(cfg, ws);
    const std::string text = prompt ? *prompt : cfg.prompt;
    const TokenSequence tokens = tokenize(text, host.config.vocab);
    if (tokens.size() > host.config.context)
        throw InputError("prompt has " + std::to_string(tokens.size()) + " tokens; the host context is " +
                         std::to_string(host.config.context));
    const AttributionConfig ac = attribution_config(cfg);
    say(log, "building attribution graph for \"" + text + "\"");
    const AttributionGraph full = build_graph(clt, host, tokens, ac);
    AttributeReport rep;
    rep.graph_id = graph_id_for(text, cfg.clt_path);
    rep.pruned = prune(full, ac.node_mass, ac.edge_mass);
    rep.full_path = ws.graphs() / (rep.graph_id + ".full.json");
    rep.graph_path = ws.graphs() / (rep.graph_id + ".json");
    write_text_atomic(rep.full_path, graph_to_json(full));
    write_text_atomic(rep.graph_path, graph_to_json(rep.pruned));
    for (const auto& w : full.warnings) say(log, "warning: " + w);
    say(log, "graph " + rep.graph_id + ": " + std::to_string(full.nodes.size()) + " nodes -> " +
                 std::to_string(rep.pruned.nodes.size()) + " after pruning; replacement " +
                 fmt("%.3f", full.replacement_score) + ", completeness " + fmt("%.3f", rep.pruned.completeness));
    return rep;
}

}  // namespace cltforge
