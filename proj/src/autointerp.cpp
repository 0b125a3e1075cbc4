// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/autointerp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cltforge/activation_cache.hpp"
#include "cltforge/binary_io.hpp"
#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"

namespace cltforge {

namespace {

constexpr double kLevels[] = {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0};

constexpr std::string_view kStoreMagic = std::string_view("CLTF-FS\0", 8);
constexpr std::string_view kIndexMagic = std::string_view("CLTF-IX\0", 8);
constexpr std::uint32_t kStoreVersion = 1;
constexpr std::uint32_t kStoreRecordType = 3;
constexpr std::size_t kTrailerBytes = 24;

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

}  // namespace

void AutointerpConfig::validate() const {
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    if (num_workers < 1) throw ConfigError("autointerp needs at least one worker");
    if (batch_tokens < 1) throw ConfigError("autointerp batch must hold at least one token");
    if (total_tokens < 1) throw ConfigError("total_autointerp_tokens must be > 0");
    if (quantile_capacity < 2) throw ConfigError("quantile_capacity must be >= 2");
}

std::uint64_t scan_hash(const AutointerpConfig& cfg, const CltModel& clt, const HostModel& model,
                        std::span<const TokenSequence> corpus) {
    std::ostringstream os;
    os << "k=" << cfg.top_k << ";before=" << cfg.window_before << ";after=" << cfg.window_after
       << ";tokens=" << cfg.total_tokens << ";batch=" << cfg.batch_tokens << ";top_tokens=" << cfg.top_tokens
       << ";quantile_capacity=" << cfg.quantile_capacity << ";corpus=" << corpus_hash(corpus);
    std::uint64_t h = fnv1a64(os.str());
    h = fnv1a64(serialize_clt(clt), h);
    return fnv1a64(serialize_host_model(model), h);
}

bool ranks_before(const TopExample& a, const TopExample& b) noexcept {
    if (a.activation != b.activation) return a.activation > b.activation;
    if (a.sequence_id != b.sequence_id) return a.sequence_id < b.sequence_id;
    return a.peak_position < b.peak_position;
}

std::span<const double> quantile_levels() { return kLevels; }

// --- QuantileSketch ----------------------------------------------------------

QuantileSketch::QuantileSketch(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 2)) {}

void QuantileSketch::add(float v) {
    if (levels_.empty()) {
        levels_.emplace_back();
        parity_.push_back(0);
    }
    levels_[0].push_back(v);
    ++count_;
    if (levels_[0].size() >= capacity_) compact(0);
}

void QuantileSketch::compact(std::size_t level) {
    if (levels_.size() == level + 1) {
        levels_.emplace_back();
        parity_.push_back(0);
    }
    auto& buf = levels_[level];
    std::sort(buf.begin(), buf.end());
    std::optional<float> held;
    if (buf.size() % 2 == 1) {
        held = buf.back();
        buf.pop_back();
    }
    auto& up = levels_[level + 1];
    for (std::size_t i = parity_[level]; i < buf.size(); i += 2) up.push_back(buf[i]);
    parity_[level] ^= 1;
    buf.clear();
    if (held) buf.push_back(*held);
    if (up.size() >= capacity_) compact(level + 1);
}

std::size_t QuantileSketch::retained() const noexcept {
    std::size_t n = 0;
    for (const auto& l : levels_) n += l.size();
    return n;
}

float QuantileSketch::quantile(double q) const {
    if (count_ == 0) throw StateError("quantile of an empty sketch");
    std::vector<std::pair<float, std::uint64_t>> items;
    for (std::size_t h = 0; h < levels_.size(); ++h)
        for (float v : levels_[h]) items.emplace_back(v, std::uint64_t{1} << h);
    std::sort(items.begin(), items.end());
    const double qc = std::clamp(q, 0.0, 1.0);
    const auto target = static_cast<std::uint64_t>(std::floor(qc * static_cast<double>(count_ - 1)));
    std::uint64_t seen = 0;
    for (const auto& [v, w] : items) {
        seen += w;
        if (seen > target) return v;
    }
    return items.back().first;
}

// --- FeatureAccumulator -------------------------------------------------------

FeatureAccumulator::FeatureAccumulator(FeatureKey key, std::size_t top_k, std::size_t quantile_capacity)
    : key_(key), k_(top_k), sketch_(quantile_capacity) {
    if (k_ < 1) throw ConfigError("top_k must be >= 1");
}

void FeatureAccumulator::observe(TokenId token, float activation) {
    if (activation == 0.0f) return;
    ++active_;
    sketch_.add(activation);
    auto& [count, sum] = tokens_[token];
    ++count;
    sum += activation;
}

bool FeatureAccumulator::would_accept(float activation, std::uint32_t sequence_id,
                                      std::uint32_t position) const noexcept {
    if (heap_.size() < k_) return true;
    TopExample probe;
    probe.activation = activation;
    probe.sequence_id = sequence_id;
    probe.peak_position = position;
    return ranks_before(probe, heap_.front());
}

void FeatureAccumulator::offer(TopExample example) {
    if (heap_.size() < k_) {
        heap_.push_back(std::move(example));
        std::push_heap(heap_.begin(), heap_.end(), ranks_before);
        return;
    }
    if (!ranks_before(example, heap_.front())) return;
    std::pop_heap(heap_.begin(), heap_.end(), ranks_before);
    heap_.back() = std::move(example);
    std::push_heap(heap_.begin(), heap_.end(), ranks_before);
}

FeatureRecord FeatureAccumulator::summarize(std::uint64_t tokens_scanned, std::size_t top_tokens) const {
    FeatureRecord r;
    r.key = key_;
    r.top = heap_;
    std::sort(r.top.begin(), r.top.end(), ranks_before);
    for (const auto& [tok, cs] : tokens_) r.top_tokens.push_back({tok, cs.first, cs.second / double(cs.first)});
    std::sort(r.top_tokens.begin(), r.top_tokens.end(), [](const TokenStat& a, const TokenStat& b) {
        if (a.mean_activation != b.mean_activation) return a.mean_activation > b.mean_activation;
        if (a.count != b.count) return a.count > b.count;
        return a.token < b.token;
    });
    if (r.top_tokens.size() > top_tokens) r.top_tokens.resize(top_tokens);
    if (active_ > 0)
        for (double q : kLevels) r.quantiles.push_back(sketch_.quantile(q));
    r.active_count = active_;
    r.frequency = tokens_scanned == 0 ? 0.0 : double(active_) / double(tokens_scanned);
    return r;
}

// --- scan ----------------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> worker_feature_spans(std::size_t num_layers, std::size_t d_features,
                                                                     std::size_t num_workers) {
    if (num_workers == 0) throw ConfigError("autointerp needs at least one worker");
    const std::size_t total = num_layers * d_features;
    if (num_workers > total) throw ConfigError("more autointerp workers than features");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    const std::size_t base = total / num_workers, extra = total % num_workers;
    std::size_t begin = 0;
    for (std::size_t w = 0; w < num_workers; ++w) {
        const std::size_t size = base + (w < extra ? 1 : 0);
        out.emplace_back(begin, begin + size);
        begin += size;
    }
    return out;
}

namespace {

struct WorkerScan {
    const CltModel& clt;
    const HostModel& model;
    std::span<const TokenSequence> corpus;
    const AutointerpConfig& cfg;
    std::size_t seqs_per_batch;
    std::uint64_t tokens;

    FeatureStore run(std::size_t worker, std::size_t begin, std::size_t end) const {
        const std::size_t L = clt.shape.num_layers, F = clt.shape.d_features();
        std::vector<FeatureRange> ranges(L);
        std::vector<std::vector<FeatureAccumulator>> accs(L);
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t lo = std::max(begin, l * F), hi = std::min(end, (l + 1) * F);
            if (lo >= hi) continue;
            ranges[l] = {lo - l * F, hi - l * F};
            for (std::size_t f = ranges[l].begin; f < ranges[l].end; ++f)
                accs[l].emplace_back(FeatureKey{std::uint32_t(l), std::uint32_t(f)}, cfg.top_k, cfg.quantile_capacity);
        }

        NormFactors norms{clt.input_norm, clt.output_norm};
        OnTheFlySource source(model, corpus, norms, seqs_per_batch);
        StoreManifest manifest;
        manifest.worker_ids = {static_cast<std::uint32_t>(worker)};
        manifest.tokens_scanned = tokens;
        while (auto batch = source.next()) {
            const ActivationBatch& b = *batch;
            manifest.peak_batch_tokens = std::max<std::uint64_t>(manifest.peak_batch_tokens, b.size());
            for (std::size_t l = 0; l < L; ++l) {
                if (ranges[l].size() == 0) continue;
                const Tensor2 pre = pre_activations(clt, l, b.inputs[l], ranges[l]);
                const Tensor2 z = jump_relu(clt, l, pre, ranges[l]);
                for (std::size_t j = 0; j < ranges[l].size(); ++j) consume(b, z, j, accs[l][j]);
            }
            std::uint64_t resident = 0;
            for (const auto& layer : accs)
                for (const auto& a : layer) resident += a.resident_examples();
            manifest.peak_resident_examples = std::max(manifest.peak_resident_examples, resident);
        }

        FeatureStore store;
        store.manifest = manifest;
        for (const auto& layer : accs)
            for (const auto& a : layer) {
                FeatureRecord r = a.summarize(tokens, cfg.top_tokens);
                store.records.emplace(r.key, std::move(r));
            }
        return store;
    }

    // Batches hold whole sequences in order, so each sequence's peak is exact.
    void consume(const ActivationBatch& b, const Tensor2& z, std::size_t col, FeatureAccumulator& acc) const {
        const std::size_t n = b.size();
        std::size_t start = 0;
        while (start < n) {
            std::size_t stop = start;
            while (stop < n && b.sequence_ids[stop] == b.sequence_ids[start]) ++stop;
            float best = 0.0f;
            std::size_t best_row = n;
            for (std::size_t i = start; i < stop; ++i) {
                const float a = z(i, col);
                acc.observe(b.tokens[i], a);
                if (a > best) {
                    best = a;
                    best_row = i;
                }
            }
            if (best_row < n && acc.would_accept(best, b.sequence_ids[best_row], b.positions[best_row])) {
                TopExample ex;
                ex.activation = best;
                ex.sequence_id = b.sequence_ids[best_row];
                ex.peak_position = b.positions[best_row];
                const std::size_t lo = best_row - std::min(best_row - start, cfg.window_before);
                const std::size_t hi = std::min(stop, best_row + cfg.window_after + 1);
                ex.window_start = b.positions[lo];
                for (std::size_t i = lo; i < hi; ++i) {
                    ex.tokens.push_back(b.tokens[i]);
                    ex.activations.push_back(z(i, col));
                }
                acc.offer(std::move(ex));
            }
            start = stop;
        }
    }
};

}  // namespace

std::vector<FeatureStore> scan(const CltModel& clt, const HostModel& model, std::span<const TokenSequence> corpus,
                               const AutointerpConfig& cfg) {
    cfg.validate();
    if (clt.shape.num_layers != model.config.num_layers || clt.shape.d_model != model.config.d_model)
        throw ConfigError("CLT shape does not match the host model");

    std::size_t count = 0, tokens = 0, longest = 1;
    while (count < corpus.size() && tokens + corpus[count].size() <= cfg.total_tokens) {
        tokens += corpus[count].size();
        longest = std::max(longest, corpus[count].size());
        ++count;
    }
    if (tokens < cfg.batch_tokens)
        throw ConfigError("corpus holds " + std::to_string(tokens) + " tokens, fewer than one autointerp batch (" +
                          std::to_string(cfg.batch_tokens) + ")");
    const auto selected = corpus.first(count);
    const std::uint64_t hash = scan_hash(cfg, clt, model, corpus);

    const WorkerScan job{clt, model, selected, cfg, std::max<std::size_t>(1, cfg.batch_tokens / longest), tokens};
    const auto spans = worker_feature_spans(clt.shape.num_layers, clt.shape.d_features(), cfg.num_workers);
    std::vector<FeatureStore> stores(spans.size());
    std::vector<std::exception_ptr> errors(spans.size());
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < spans.size(); ++w)
        threads.emplace_back([&, w] {
            try {
                stores[w] = job.run(w, spans[w].first, spans[w].second);
                stores[w].manifest.config_hash = hash;
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return stores;
}

FeatureStore merge(std::vector<FeatureStore> stores) {
    if (stores.empty()) throw MergeError("nothing to merge");
    FeatureStore out;
    out.manifest = stores[0].manifest;
    out.manifest.worker_ids.clear();
    for (auto& s : stores) {
        if (s.manifest.config_hash != out.manifest.config_hash)
            throw MergeError("stores come from different scan configurations");
        if (s.manifest.tokens_scanned != out.manifest.tokens_scanned)
            throw MergeError("stores scanned different token counts");
        for (auto& [key, rec] : s.records) {
            if (out.records.count(key))
                throw MergeError("feature (" + std::to_string(key.layer) + ", " + std::to_string(key.feature) +
                                 ") appears in more than one store");
            out.records.emplace(key, std::move(rec));
        }
        for (auto id : s.manifest.worker_ids) out.manifest.worker_ids.push_back(id);
        out.manifest.peak_resident_examples =
            std::max(out.manifest.peak_resident_examples, s.manifest.peak_resident_examples);
        out.manifest.peak_batch_tokens = std::max(out.manifest.peak_batch_tokens, s.manifest.peak_batch_tokens);
    }
    std::sort(out.manifest.worker_ids.begin(), out.manifest.worker_ids.end());
    return out;
}

void check_coverage(const FeatureStore& store, const CltShape& shape) {
    const std::size_t F = shape.d_features();
    if (store.records.size() != shape.num_layers * F)
        throw StateError("feature store holds " + std::to_string(store.records.size()) + " records, expected " +
                         std::to_string(shape.num_layers * F));
    for (std::size_t l = 0; l < shape.num_layers; ++l)
        for (std::size_t f = 0; f < F; ++f)
            if (!store.records.count({std::uint32_t(l), std::uint32_t(f)}))
                throw StateError("feature store is missing (" + std::to_string(l) + ", " + std::to_string(f) + ")");
}

// --- explanations ----------------------------------------------------------------

std::string render_window(const TopExample& ex) {
    std::string out;
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
        if (i) out += ' ';
        const std::string t = token_text(ex.tokens[i]);
        out += ex.window_start + i == ex.peak_position ? "[[" + t + "]]" : t;
    }
    return out;
}

std::string render_prompt(const FeatureRecord& record) {
    std::ostringstream os;
    os << "Feature " << record.key.layer << "/" << record.key.feature
       << ": the contexts below are where it activates most strongly, strongest first. "
          "The peak token is marked [[like this]].\n";
    for (std::size_t i = 0; i < record.top.size(); ++i)
        os << "Example " << i + 1 << " (activation " << fmt("%.6g", record.top[i].activation)
           << "): " << render_window(record.top[i]) << "\n";
    if (!record.top_tokens.empty()) {
        os << "Top tokens:";
        for (std::size_t i = 0; i < record.top_tokens.size(); ++i)
            os << (i ? ", " : " ") << "'" << token_text(record.top_tokens[i].token) << "' ("
               << fmt("%.4g", record.top_tokens[i].mean_activation) << ")";
        os << "\n";
    }
    os << "Reply with one short sentence describing what the feature detects.\n";
    return os.str();
}

std::string template_explanation(const FeatureRecord& record) {
    if (record.top.empty()) return no_activation_text;
    std::string out = "Fires on";
    const std::size_t shown = std::min<std::size_t>(5, record.top_tokens.size());
    for (std::size_t i = 0; i < shown; ++i) out += (i ? ", '" : " '") + token_text(record.top_tokens[i].token) + "'";
    out += "; peak activation " + fmt("%.3g", record.top[0].activation) + ", active on " +
           fmt("%.2f", 100.0 * record.frequency) + "% of tokens. Strongest context: " + render_window(record.top[0]);
    return out;
}

std::string TemplateExplainer::generate(const ExplanationRequest& request) {
    if (!request.record) throw InputError("template explainer needs the feature record");
    return template_explanation(*request.record);
}

HttpExplainer::HttpExplainer(std::string url, double timeout_seconds) : timeout_(timeout_seconds) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw ConfigError("explainer_url is not an http(s) URL: " + url);
    scheme_host_port_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/";
}

std::string HttpExplainer::generate(const ExplanationRequest& request) {
    httplib::Client client(scheme_host_port_);
    const auto secs = static_cast<time_t>(timeout_);
    const auto usecs = static_cast<time_t>((timeout_ - double(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    const nlohmann::json body = {
        {"prompt", request.prompt}, {"layer", request.key.layer}, {"feature", request.key.feature}};
    auto res = client.Post(path_, body.dump(), "application/json");
    if (!res) throw IoError("explainer request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw IoError("explainer returned HTTP " + std::to_string(res->status));
    try {
        const auto j = nlohmann::json::parse(res->body);
        return j.at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("explainer response is not {\"text\": ...}: ") + e.what());
    }
}

Explanation explain(const FeatureRecord& record, Explainer& generator) {
    if (record.top.empty()) return {no_activation_text, "template", std::nullopt};
    ExplanationRequest req{record.key, render_prompt(record), &record};
    try {
        return {generator.generate(req), generator.name(), std::nullopt};
    } catch (const std::exception& e) {
        return {template_explanation(record), "template", std::string(e.what())};
    }
}

void explain_all(FeatureStore& store, Explainer& generator, std::size_t max_in_flight) {
    std::vector<FeatureRecord*> todo;
    for (auto& [key, rec] : store.records) todo.push_back(&rec);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < todo.size(); i = next++) {
            Explanation e = explain(*todo[i], generator);
            todo[i]->explanation = std::move(e.text);
            todo[i]->explanation_source = std::move(e.source);
            todo[i]->explanation_warning = std::move(e.warning);
        }
    };
    const std::size_t n = std::clamp<std::size_t>(max_in_flight, 1, std::max<std::size_t>(1, todo.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t + 1 < n; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
}

// --- features.cltf ------------------------------------------------------------------

Bytes serialize_record(const FeatureRecord& r) {
    ByteWriter w;
    w.u32(r.key.layer);
    w.u32(r.key.feature);
    w.u64(r.active_count);
    w.f64(r.frequency);
    w.u32(static_cast<std::uint32_t>(r.top.size()));
    for (const auto& ex : r.top) {
        w.f32(ex.activation);
        w.u32(ex.sequence_id);
        w.u32(ex.peak_position);
        w.u32(ex.window_start);
        w.u32(static_cast<std::uint32_t>(ex.tokens.size()));
        for (TokenId t : ex.tokens) w.u32(t);
        w.f32_array(ex.activations);
    }
    w.u32(static_cast<std::uint32_t>(r.top_tokens.size()));
    for (const auto& t : r.top_tokens) {
        w.u32(t.token);
        w.u64(t.count);
        w.f64(t.mean_activation);
    }
    w.u32(static_cast<std::uint32_t>(r.quantiles.size()));
    w.f32_array(r.quantiles);
    w.u8(r.explanation ? 1 : 0);
    if (r.explanation) w.str(*r.explanation);
    w.str(r.explanation_source);
    w.u8(r.explanation_warning ? 1 : 0);
    if (r.explanation_warning) w.str(*r.explanation_warning);
    w.u32(static_cast<std::uint32_t>(r.tags.size()));
    for (const auto& [k, v] : r.tags) {
        w.str(k);
        w.str(v);
    }
    return w.take();
}

FeatureRecord deserialize_record(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes, "feature record");
    FeatureRecord r;
    r.key.layer = in.u32();
    r.key.feature = in.u32();
    r.active_count = in.u64();
    r.frequency = in.f64();
    const std::uint32_t ntop = in.u32();
    for (std::uint32_t i = 0; i < ntop; ++i) {
        TopExample ex;
        ex.activation = in.f32();
        ex.sequence_id = in.u32();
        ex.peak_position = in.u32();
        ex.window_start = in.u32();
        const std::uint32_t nt = in.u32();
        if (nt > in.remaining() / 8) throw IntegrityError("feature record: window length out of range");
        for (std::uint32_t k = 0; k < nt; ++k) ex.tokens.push_back(in.u32());
        ex.activations = in.f32_array(nt);
        r.top.push_back(std::move(ex));
    }
    const std::uint32_t ntok = in.u32();
    for (std::uint32_t i = 0; i < ntok; ++i) {
        TokenStat t;
        t.token = in.u32();
        t.count = in.u64();
        t.mean_activation = in.f64();
        r.top_tokens.push_back(t);
    }
    r.quantiles = in.f32_array(in.u32());
    if (in.u8()) r.explanation = in.str();
    r.explanation_source = in.str();
    if (in.u8()) r.explanation_warning = in.str();
    const std::uint32_t ntags = in.u32();
    for (std::uint32_t i = 0; i < ntags; ++i) {
        std::string k = in.str();
        r.tags[k] = in.str();
    }
    if (in.remaining() != 0) throw IntegrityError("feature record: trailing bytes");
    return r;
}

namespace {

void write_manifest(ByteWriter& w, const StoreManifest& m) {
    w.u64(m.config_hash);
    w.u64(m.tokens_scanned);
    w.u64(m.peak_resident_examples);
    w.u64(m.peak_batch_tokens);
    w.u32(static_cast<std::uint32_t>(m.worker_ids.size()));
    for (auto id : m.worker_ids) w.u32(id);
}

Bytes read_range(const std::filesystem::path& path, std::uint64_t offset, std::uint64_t length) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(static_cast<std::streamoff>(offset));
    Bytes out(length);
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(length));
    if (static_cast<std::uint64_t>(in.gcount()) != length)
        throw IntegrityError(path.string() + ": truncated feature store");
    return out;
}

}  // namespace

void save_store(const FeatureStore& store, const std::filesystem::path& path) {
    ByteWriter w;
    w.tag(kStoreMagic);
    w.u32(kStoreVersion);
    w.u32(kStoreRecordType);
    write_manifest(w, store.manifest);
    w.u64(store.records.size());
    struct Entry {
        FeatureKey key;
        std::uint64_t offset, length, hash;
    };
    std::vector<Entry> index;
    for (const auto& [key, rec] : store.records) {
        const Bytes payload = serialize_record(rec);
        w.u64(payload.size());
        index.push_back({key, w.size(), payload.size(), fnv1a64(payload)});
        w.bytes(payload);
    }
    const std::uint64_t index_offset = w.size();
    w.u64(index.size());
    for (const auto& e : index) {
        w.u32(e.key.layer);
        w.u32(e.key.feature);
        w.u64(e.offset);
        w.u64(e.length);
        w.u64(e.hash);
    }
    const std::uint64_t index_hash =
        fnv1a64(std::span<const std::uint8_t>(w.buffer()).subspan(index_offset, w.size() - index_offset));
    w.u64(index_offset);
    w.u64(index_hash);
    w.tag(kIndexMagic);
    write_file_atomic(path, w.buffer());
}

FeatureStoreReader::FeatureStoreReader(std::filesystem::path path) : path_(std::move(path)) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path_, ec);
    if (ec) throw IoError("cannot open feature store " + path_.string());
    if (size < 64) throw IntegrityError(path_.string() + ": too small to be a feature store");

    const Bytes trailer = read_range(path_, size - kTrailerBytes, kTrailerBytes);
    ByteReader t(trailer, path_.string() + " trailer");
    const std::uint64_t index_offset = t.u64();
    const std::uint64_t index_hash = t.u64();
    t.expect_tag(kIndexMagic);
    if (index_offset >= size - kTrailerBytes) throw IntegrityError(path_.string() + ": index offset out of range");

    const Bytes index = read_range(path_, index_offset, size - kTrailerBytes - index_offset);
    if (fnv1a64(index) != index_hash) throw IntegrityError(path_.string() + ": index checksum mismatch");
    ByteReader ix(index, path_.string() + " index");
    const std::uint64_t n = ix.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        FeatureKey k{ix.u32(), ix.u32()};
        const std::uint64_t off = ix.u64(), len = ix.u64();
        ix.u64();
        if (off + len > index_offset) throw IntegrityError(path_.string() + ": record extends past the index");
        index_.emplace(k, std::make_pair(off, len));
    }

    const Bytes head = read_range(path_, 0, std::min<std::uint64_t>(index_offset, 4096));
    ByteReader h(head, path_.string() + " header");
    h.expect_tag(kStoreMagic);
    if (h.u32() != kStoreVersion) throw IntegrityError(path_.string() + ": unsupported feature store version");
    if (h.u32() != kStoreRecordType) throw IntegrityError(path_.string() + ": not a feature store");
    manifest_.config_hash = h.u64();
    manifest_.tokens_scanned = h.u64();
    manifest_.peak_resident_examples = h.u64();
    manifest_.peak_batch_tokens = h.u64();
    const std::uint32_t nw = h.u32();
    for (std::uint32_t i = 0; i < nw; ++i) manifest_.worker_ids.push_back(h.u32());
    if (h.u64() != n) throw IntegrityError(path_.string() + ": record count disagrees with the index");
}

FeatureRecord FeatureStoreReader::get(FeatureKey key) const {
    const auto it = index_.find(key);
    if (it == index_.end())
        throw LookupError("no feature (" + std::to_string(key.layer) + ", " + std::to_string(key.feature) + ") in " +
                          path_.string());
    const Bytes payload = read_range(path_, it->second.first, it->second.second);
    return deserialize_record(payload);
}

FeatureStore load_store(const std::filesystem::path& path) {
    const Bytes all = read_file(path);
    FeatureStoreReader reader(path);
    FeatureStore store;
    store.manifest = reader.manifest();
    ByteReader in(all, path.string());
    in.expect_tag(kStoreMagic);
    in.u32();
    in.u32();
    in.u64();
    in.u64();
    in.u64();
    in.u64();
    const std::uint32_t nw = in.u32();
    for (std::uint32_t i = 0; i < nw; ++i) in.u32();
    const std::uint64_t n = in.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::uint64_t len = in.u64();
        FeatureRecord r = deserialize_record(in.bytes(len));
        if (!reader.contains(r.key)) throw IntegrityError(path.string() + ": record missing from the index");
        const FeatureKey key = r.key;
        if (!store.records.emplace(key, std::move(r)).second)
            throw IntegrityError(path.string() + ": duplicate feature key");
    }
    return store;
}

std::string record_to_json(const FeatureRecord& r) {
    nlohmann::json j;
    j["layer"] = r.key.layer;
    j["feature"] = r.key.feature;
    j["active_count"] = r.active_count;
    j["frequency"] = r.frequency;
    j["top"] = nlohmann::json::array();
    for (const auto& ex : r.top) {
        nlohmann::json tokens = nlohmann::json::array();
        for (TokenId t : ex.tokens) tokens.push_back(token_text(t));
        j["top"].push_back({{"activation", ex.activation},
                            {"sequence_id", ex.sequence_id},
                            {"peak_position", ex.peak_position},
                            {"window_start", ex.window_start},
                            {"token_ids", ex.tokens},
                            {"tokens", tokens},
                            {"activations", ex.activations}});
    }
    j["top_tokens"] = nlohmann::json::array();
    for (const auto& t : r.top_tokens)
        j["top_tokens"].push_back(
            {{"token_id", t.token}, {"token", token_text(t.token)}, {"count", t.count}, {"mean_activation", t.mean_activation}});
    j["quantile_levels"] = std::vector<double>(std::begin(kLevels), std::end(kLevels));
    j["quantiles"] = r.quantiles;
    j["explanation"] = r.explanation ? nlohmann::json(*r.explanation) : nlohmann::json(nullptr);
    j["explanation_source"] = r.explanation_source;
    j["explanation_warning"] =
        r.explanation_warning ? nlohmann::json(*r.explanation_warning) : nlohmann::json(nullptr);
    j["tags"] = r.tags;
    return j.dump();
}

}  // namespace cltforge
