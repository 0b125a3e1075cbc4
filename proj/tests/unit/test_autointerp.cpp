// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cltforge/autointerp.hpp"
#include "cltforge/corpus.hpp"
#include "cltforge/error.hpp"
#include "support/autointerp_oracle.hpp"

using namespace cltforge;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    HostModel model;
    std::vector<TokenSequence> corpus;
    CltModel clt;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x;
        Rng rng(11);
        x.model = HostModel::random(HostConfig{}, rng);
        CorpusSpec spec;
        spec.num_sequences = 700;
        x.corpus = make_synthetic_corpus(rng, spec);
        x.clt = CltModel::random({2, 16, 2}, rng);
        // Unit-norm inputs on average, like a trained CLT would see.
        for (std::size_t l = 0; l < 2; ++l) {
            double s = 0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < 50; ++i) {
                const auto cap = forward_with_capture(x.model, x.corpus[i]);
                for (std::size_t p = 0; p < cap.mlp_in[l].rows(); ++p, ++n) {
                    double r = 0;
                    for (float v : cap.mlp_in[l].row(p)) r += double(v) * v;
                    s += std::sqrt(r);
                }
            }
            x.clt.input_norm[l] = static_cast<float>(s / n);
        }
        return x;
    }();
    return f;
}

AutointerpConfig small_config(std::size_t workers) {
    AutointerpConfig cfg;
    cfg.quantile_capacity = 512;
    cfg.top_k = 5;
    cfg.total_tokens = 20000;
    cfg.batch_tokens = 1024;
    cfg.num_workers = workers;
    return cfg;
}

}  // namespace

TEST(Ranking, TieBreakOnSequenceThenPosition) {
    TopExample a{1.0f, 3, 5, 0, {}, {}}, b{1.0f, 3, 6, 0, {}, {}}, c{1.0f, 2, 9, 0, {}, {}}, d{1.5f, 9, 9, 0, {}, {}};
    EXPECT_TRUE(ranks_before(a, b));
    EXPECT_TRUE(ranks_before(c, a));
    EXPECT_TRUE(ranks_before(d, c));
    EXPECT_FALSE(ranks_before(a, a));
}

TEST(Quantiles, ExactBelowCapacity) {
    QuantileSketch s(1024);
    std::vector<float> vals;
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        vals.push_back(static_cast<float>(rng.uniform()));
        s.add(vals.back());
    }
    std::sort(vals.begin(), vals.end());
    for (double q : quantile_levels()) EXPECT_EQ(s.quantile(q), vals[std::size_t(std::floor(q * 999))]) << q;
}

TEST(Quantiles, ConstantStreamIsFlat) {
    QuantileSketch s(64);
    for (int i = 0; i < 5000; ++i) s.add(0.25f);
    for (double q : quantile_levels()) EXPECT_EQ(s.quantile(q), 0.25f);
    EXPECT_THROW(QuantileSketch().quantile(0.5), StateError);
}

TEST(Quantiles, CompactedRankErrorIsSmallAndMemoryBounded) {
    QuantileSketch s(256);
    std::vector<float> vals;
    Rng rng(2);
    for (int i = 0; i < 200000; ++i) {
        vals.push_back(static_cast<float>(rng.normal()));
        s.add(vals.back());
    }
    std::sort(vals.begin(), vals.end());
    EXPECT_LT(s.retained(), 256u * 12);
    for (double q : quantile_levels()) {
        const float v = s.quantile(q);
        const double rank = double(std::lower_bound(vals.begin(), vals.end(), v) - vals.begin());
        EXPECT_LE(std::fabs(rank - q * (vals.size() - 1)) / vals.size(), 0.02) << q;
    }
}

TEST(Accumulator, SingleActivation) {
    FeatureAccumulator acc({0, 3}, 4);
    acc.observe(7, 0.0f);
    acc.observe(9, 0.625f);
    acc.offer({0.625f, 0, 1, 0, {7, 9}, {0.0f, 0.625f}});
    const auto r = acc.summarize(2, 10);
    ASSERT_EQ(r.top_tokens.size(), 1u);
    EXPECT_EQ(r.top_tokens[0].token, 9u);
    EXPECT_EQ(r.top_tokens[0].mean_activation, 0.625);
    EXPECT_EQ(r.frequency, 0.5);
    for (float q : r.quantiles) EXPECT_EQ(q, 0.625f);
}

TEST(Accumulator, NeverActive) {
    FeatureAccumulator acc({1, 0}, 4);
    for (int i = 0; i < 10; ++i) acc.observe(1, 0.0f);
    const auto r = acc.summarize(10, 10);
    EXPECT_TRUE(r.top.empty());
    EXPECT_TRUE(r.quantiles.empty());
    EXPECT_EQ(r.frequency, 0.0);
    EXPECT_EQ(template_explanation(r), no_activation_text);
}

TEST(Accumulator, KeepsBestKUnderAnyInsertionOrder) {
    std::vector<TopExample> all;
    Rng rng(3);
    for (std::uint32_t i = 0; i < 200; ++i)
        all.push_back({static_cast<float>(rng.below(20)) / 4.0f, static_cast<std::uint32_t>(rng.below(30)), i, 0, {}, {}});
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end(), ranks_before);
    sorted.resize(7);
    for (int trial = 0; trial < 5; ++trial) {
        rng.shuffle(all);
        FeatureAccumulator acc({0, 0}, 7);
        for (const auto& e : all) {
            if (acc.would_accept(e.activation, e.sequence_id, e.peak_position)) acc.offer(e);
            EXPECT_LE(acc.resident_examples(), 7u);
        }
        EXPECT_EQ(acc.summarize(1, 1).top, sorted);
    }
}

TEST(Scan, MatchesBruteForceOracle) {
    const auto& fx = fixture();
    const auto cfg = small_config(2);
    const auto store = merge(scan(fx.clt, fx.model, fx.corpus, cfg));
    const auto ref = oracle::brute_force(fx.clt, fx.model, fx.corpus, cfg.total_tokens, cfg.top_k, cfg.window_before,
                                         cfg.window_after);
    ASSERT_EQ(store.records.size(), ref.features.size());
    EXPECT_EQ(store.manifest.tokens_scanned, ref.tokens);
    std::size_t active_features = 0, compacted = 0;
    for (const auto& [key, bf] : ref.features) {
        const auto& rec = store.records.at(key);
        EXPECT_EQ(rec.top, bf.top) << key.layer << "/" << key.feature;
        EXPECT_EQ(rec.active_count, bf.active_values.size());
        EXPECT_DOUBLE_EQ(rec.frequency, double(bf.active_values.size()) / double(ref.tokens));
        if (bf.active_values.empty()) {
            EXPECT_TRUE(rec.quantiles.empty());
            continue;
        }
        ++active_features;
        // Within one rank position of the sorted oracle while the sketch is
        // uncompacted, within 2% of the stream length after.
        const auto& v = bf.active_values;
        const auto levels = quantile_levels();
        const double slack = v.size() <= cfg.quantile_capacity ? 1.0 : 0.02 * double(v.size());
        if (v.size() > cfg.quantile_capacity) ++compacted;
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const double target = std::floor(levels[i] * double(v.size() - 1));
            const double lo = double(std::lower_bound(v.begin(), v.end(), rec.quantiles[i]) - v.begin());
            const double hi = double(std::upper_bound(v.begin(), v.end(), rec.quantiles[i]) - v.begin() - 1);
            EXPECT_TRUE(lo <= target + slack && hi + slack >= target) << key.feature << " q" << levels[i];
        }
        for (const auto& t : rec.top_tokens) {
            const auto& [count, sum] = bf.tokens.at(t.token);
            EXPECT_EQ(t.count, count);
            EXPECT_NEAR(t.mean_activation, sum / double(count), 1e-12);
        }
    }
    EXPECT_GT(active_features, 4u);
    EXPECT_GT(compacted, 0u);
}

TEST(Scan, TiesResolveToLowestSequenceAndPosition) {
    const auto& fx = fixture();
    CltModel clt = fx.clt;
    // Feature 0 of layer 0 fires with activation exactly 1 on every token.
    std::fill(clt.w_enc[0].row(0).begin(), clt.w_enc[0].row(0).end(), 0.0f);
    clt.b_enc[0][0] = 1.0f;
    auto cfg = small_config(1);
    const auto store = merge(scan(clt, fx.model, fx.corpus, cfg));
    const auto& top = store.records.at({0, 0}).top;
    ASSERT_EQ(top.size(), cfg.top_k);
    for (std::uint32_t i = 0; i < top.size(); ++i) {
        EXPECT_EQ(top[i].sequence_id, i);
        EXPECT_EQ(top[i].peak_position, 0u);
        EXPECT_EQ(top[i].activation, 1.0f);
    }
    EXPECT_EQ(store.records.at({0, 0}).frequency, 1.0);
}

TEST(Scan, PlantedFeatureFindsTheLargestInput) {
    const auto& fx = fixture();
    auto cfg = small_config(1);
    cfg.top_k = 1;
    // Target: the layer-1 input of largest norm (earliest on ties).
    std::size_t tokens = 0, best_s = 0, best_p = 0;
    double best = -1;
    std::vector<float> hbest;
    for (std::size_t s = 0; s < fx.corpus.size() && tokens + fx.corpus[s].size() <= cfg.total_tokens; ++s) {
        tokens += fx.corpus[s].size();
        const auto cap = forward_with_capture(fx.model, fx.corpus[s]);
        for (std::size_t p = 0; p < fx.corpus[s].size(); ++p) {
            double n = 0;
            for (float v : cap.mlp_in[1].row(p)) n += double(v) * v;
            if (n > best) {
                best = n;
                best_s = s;
                best_p = p;
                hbest.assign(cap.mlp_in[1].row(p).begin(), cap.mlp_in[1].row(p).end());
            }
        }
    }
    CltModel clt = fx.clt;
    const double norm = std::sqrt(best);
    for (std::size_t k = 0; k < 16; ++k) clt.w_enc[1](3, k) = static_cast<float>(hbest[k] / norm);
    clt.b_enc[1][3] = 0.0f;
    clt.log_threshold[1][3] = std::log(1e-6f);
    const auto store = merge(scan(clt, fx.model, fx.corpus, cfg));
    const auto& rec = store.records.at({1, 3});
    ASSERT_EQ(rec.top.size(), 1u);
    EXPECT_EQ(rec.top[0].sequence_id, best_s);
    EXPECT_EQ(rec.top[0].peak_position, best_p);
    const auto& seq = fx.corpus[best_s];
    const std::size_t lo = best_p >= 8 ? best_p - 8 : 0, hi = std::min(seq.size(), best_p + 5);
    EXPECT_EQ(rec.top[0].tokens, TokenSequence(seq.begin() + lo, seq.begin() + hi));
}

TEST(Scan, WorkerCountInvariance) {
    const auto& fx = fixture();
    const auto one = merge(scan(fx.clt, fx.model, fx.corpus, small_config(1)));
    for (std::size_t w : {2u, 3u, 4u}) {
        auto parts = scan(fx.clt, fx.model, fx.corpus, small_config(w));
        ASSERT_EQ(parts.size(), w);
        const auto merged = merge(parts);
        EXPECT_EQ(merged.records, one.records) << w;
        EXPECT_EQ(merged.manifest.worker_ids.size(), w);
        check_coverage(merged, fx.clt.shape);
    }
}

TEST(Scan, ResidentStateIsBounded) {
    const auto& fx = fixture();
    const auto cfg = small_config(4);
    const auto parts = scan(fx.clt, fx.model, fx.corpus, cfg);
    for (const auto& p : parts) {
        EXPECT_LE(p.manifest.peak_resident_examples, p.records.size() * cfg.top_k);
        EXPECT_LE(p.manifest.peak_batch_tokens, cfg.batch_tokens);
        EXPECT_GT(p.manifest.peak_batch_tokens, 0u);
    }
}

TEST(Scan, CorpusShorterThanOneBatchIsConfigError) {
    const auto& fx = fixture();
    auto cfg = small_config(1);
    cfg.batch_tokens = 1 << 20;
    EXPECT_THROW(scan(fx.clt, fx.model, fx.corpus, cfg), ConfigError);
    cfg = small_config(1);
    cfg.top_k = 0;
    EXPECT_THROW(scan(fx.clt, fx.model, fx.corpus, cfg), ConfigError);
}

TEST(Merge, IdentityAndErrors) {
    const auto& fx = fixture();
    auto parts = scan(fx.clt, fx.model, fx.corpus, small_config(2));
    const auto single = merge({parts[0]});
    EXPECT_EQ(single.records, parts[0].records);
    EXPECT_EQ(merge(parts).records.size(), parts[0].records.size() + parts[1].records.size());
    EXPECT_THROW(merge({parts[0], parts[0]}), MergeError);
    auto other = parts[1];
    other.manifest.config_hash ^= 1;
    EXPECT_THROW(merge({parts[0], other}), MergeError);
    EXPECT_THROW(check_coverage(parts[0], fx.clt.shape), StateError);
    EXPECT_THROW(merge({}), MergeError);
}

TEST(Merge, ConfigHashIgnoresWorkerCountOnly) {
    const auto& fx = fixture();
    auto a = small_config(1), b = small_config(4), c = small_config(1);
    c.window_after = 2;
    const auto h = scan_hash(a, fx.clt, fx.model, fx.corpus);
    EXPECT_EQ(h, scan_hash(b, fx.clt, fx.model, fx.corpus));
    EXPECT_NE(h, scan_hash(c, fx.clt, fx.model, fx.corpus));
}

namespace {

FeatureRecord sample_record() {
    const auto& fx = fixture();
    const auto store = merge(scan(fx.clt, fx.model, fx.corpus, small_config(1)));
    for (const auto& [key, rec] : store.records)
        if (rec.top.size() == 5) return rec;
    throw std::runtime_error("no feature with a full top-K");
}

class FailingExplainer final : public Explainer {
public:
    std::string name() const override { return "remote"; }
    std::string generate(const ExplanationRequest&) override { throw IoError("explainer request failed: timeout"); }
};

class EchoExplainer final : public Explainer {
public:
    std::string name() const override { return "remote"; }
    std::string generate(const ExplanationRequest& r) override {
        return "echo " + std::to_string(r.key.layer) + "/" + std::to_string(r.key.feature);
    }
};

}  // namespace

TEST(Explain, PromptListsTopWindowsInOrder) {
    const FeatureRecord rec = sample_record();
    const std::string prompt = render_prompt(rec);
    static const std::regex line(R"(^Example (\d+) \(activation ([^)]+)\): (.*)$)");
    std::istringstream in(prompt);
    std::string l;
    std::size_t i = 0;
    while (std::getline(in, l)) {
        std::smatch m;
        if (!std::regex_match(l, m, line)) continue;
        ASSERT_LT(i, rec.top.size());
        EXPECT_EQ(std::stoul(m[1].str()), i + 1);
        EXPECT_NEAR(std::stod(m[2].str()), rec.top[i].activation, 1e-5 * rec.top[i].activation);
        EXPECT_EQ(m[3].str(), render_window(rec.top[i]));
        ++i;
    }
    EXPECT_EQ(i, rec.top.size());
    EXPECT_NE(render_window(rec.top[0]).find("[["), std::string::npos);
}

TEST(Explain, TemplateIsDeterministicAndFallbackIsFlagged) {
    const FeatureRecord rec = sample_record();
    TemplateExplainer t;
    const auto a = explain(rec, t), b = explain(rec, t);
    EXPECT_EQ(a.text, b.text);
    EXPECT_EQ(a.source, "template");
    EXPECT_FALSE(a.warning);
    FailingExplainer f;
    const auto c = explain(rec, f);
    EXPECT_EQ(c.text, a.text);
    ASSERT_TRUE(c.warning);
    EXPECT_NE(c.warning->find("timeout"), std::string::npos);
    EXPECT_EQ(explain(FeatureRecord{}, f).text, no_activation_text);
}

TEST(Explain, AllRecordsWithBoundedConcurrency) {
    const auto& fx = fixture();
    auto store = merge(scan(fx.clt, fx.model, fx.corpus, small_config(1)));
    EchoExplainer e;
    explain_all(store, e, 3);
    for (const auto& [key, rec] : store.records) {
        ASSERT_TRUE(rec.explanation);
        if (rec.top.empty())
            EXPECT_EQ(*rec.explanation, no_activation_text);
        else
            EXPECT_EQ(*rec.explanation, "echo " + std::to_string(key.layer) + "/" + std::to_string(key.feature));
    }
}

TEST(Explain, HttpExplainerRoundTripAndFailure) {
    httplib::Server server;
    std::string seen_prompt;
    server.Post("/explain", [&](const httplib::Request& req, httplib::Response& res) {
        const auto j = nlohmann::json::parse(req.body);
        seen_prompt = j.at("prompt").get<std::string>();
        res.set_content(nlohmann::json{{"text", "remote says hi"}}.dump(), "application/json");
    });
    server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    const FeatureRecord rec = sample_record();
    HttpExplainer ok("http://127.0.0.1:" + std::to_string(port) + "/explain", 5.0);
    const auto a = explain(rec, ok);
    EXPECT_EQ(a.text, "remote says hi");
    EXPECT_EQ(a.source, "remote");
    EXPECT_EQ(seen_prompt, render_prompt(rec));
    HttpExplainer broken("http://127.0.0.1:" + std::to_string(port) + "/broken", 5.0);
    const auto b = explain(rec, broken);
    EXPECT_EQ(b.source, "template");
    ASSERT_TRUE(b.warning);
    EXPECT_NE(b.warning->find("500"), std::string::npos);
    server.stop();
    th.join();
    EXPECT_THROW(HttpExplainer("ftp://x"), ConfigError);
}

TEST(Store, RoundTripAndRandomAccess) {
    const auto& fx = fixture();
    auto store = merge(scan(fx.clt, fx.model, fx.corpus, small_config(2)));
    store.records.begin()->second.tags["language"] = "synthetic";
    TemplateExplainer t;
    explain_all(store, t, 2);
    const fs::path dir = fs::temp_directory_path() / "cltforge_store_test";
    fs::create_directories(dir);
    const fs::path path = dir / "features.cltf";
    save_store(store, path);
    const auto back = load_store(path);
    EXPECT_EQ(back.records, store.records);
    EXPECT_EQ(back.manifest, store.manifest);
    FeatureStoreReader reader(path);
    EXPECT_EQ(reader.size(), store.records.size());
    EXPECT_EQ(reader.get({1, 7}), store.records.at({1, 7}));
    EXPECT_THROW(reader.get({9, 9}), LookupError);
    const auto j = nlohmann::json::parse(record_to_json(store.records.at({1, 7})));
    EXPECT_EQ(j["feature"], 7);
    EXPECT_EQ(j["top"].size(), store.records.at({1, 7}).top.size());

    auto bytes = read_file(path);
    bytes[bytes.size() - 40] ^= 0xff;  // inside the index
    write_file_atomic(path, bytes);
    EXPECT_THROW(FeatureStoreReader{path}, IntegrityError);
    fs::remove_all(dir);
}
