// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cltforge/attribution.hpp"
#include "cltforge/autointerp.hpp"
#include "cltforge/clt.hpp"
#include "cltforge/config.hpp"
#include "cltforge/error.hpp"
#include "cltforge/host_model.hpp"
#include "cltforge/pipeline.hpp"
#include "cltforge/service.hpp"
#include "support/json_schema.hpp"

using namespace cltforge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path source_dir = CLTFORGE_SOURCE_DIR;

test_support::JsonSchema schema(const std::string& name) {
    return test_support::JsonSchema::load(source_dir / "docs" / "schemas" / (name + ".schema.json"));
}

void expect_valid(const std::string& name, const json& doc) {
    const auto errs = schema(name).errors(doc);
    for (const auto& e : errs) ADD_FAILURE() << name << ": " << e;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class ServiceTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / ("cltforge_service_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        cfg_ = new RunConfig(parse_config(source_dir / "configs" / "smoke.cfg"));
        const Workspace ws{root_};
        run_cache(*cfg_, ws);
        run_train(*cfg_, ws, 1);
        run_autointerp(*cfg_, ws, 2);
        graph_id_ = new std::string(run_attribute(*cfg_, ws).graph_id);
    }
    static void TearDownTestSuite() {
        fs::remove_all(root_);
        delete cfg_;
        delete graph_id_;
    }

    void SetUp() override {
        server_ = std::make_unique<ApiServer>(Workspace{root_}, *cfg_);
        port_ = server_->start("127.0.0.1", 0);
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
        client_->set_read_timeout(120, 0);
    }
    void TearDown() override {
        client_.reset();
        server_.reset();
    }

    json get(const std::string& path, int expect) {
        auto r = client_->Get(path);
        EXPECT_TRUE(r) << path;
        if (!r) return {};
        EXPECT_EQ(r->status, expect) << path << " " << r->body;
        const json j = json::parse(r->body, nullptr, false);
        EXPECT_FALSE(j.is_discarded()) << r->body;
        if (r->status >= 400) expect_valid("error", j);
        return j;
    }
    json post(const std::string& path, const std::string& body, int expect) {
        auto r = client_->Post(path, body, "application/json");
        EXPECT_TRUE(r) << path;
        if (!r) return {};
        EXPECT_EQ(r->status, expect) << path << " " << r->body;
        const json j = json::parse(r->body, nullptr, false);
        EXPECT_FALSE(j.is_discarded()) << r->body;
        if (r->status >= 400) expect_valid("error", j);
        return j;
    }
    json wait_job(const std::string& id) {
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(60);
        while (std::chrono::steady_clock::now() < deadline) {
            json j = get("/api/jobs/" + id, 200);
            const std::string st = j.value("status", "");
            if (st == "done" || st == "failed") return j;
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        ADD_FAILURE() << "job " << id << " did not finish";
        return {};
    }
    std::string graphs_path() const { return "/api/graphs/" + *graph_id_; }
    AttributionGraph stored_graph(bool full) const {
        return graph_from_json(slurp(root_ / "graphs" / (*graph_id_ + (full ? ".full.json" : ".json"))));
    }
    std::string top_feature() const {
        const AttributionGraph g = stored_graph(false);
        const AttributionNode* best = nullptr;
        for (const auto& n : g.nodes)
            if (n.kind == NodeKind::feature && (!best || n.activation > best->activation)) best = &n;
        return best ? best->id() : "";
    }

    static inline fs::path root_;
    static inline RunConfig* cfg_ = nullptr;
    static inline std::string* graph_id_ = nullptr;
    std::unique_ptr<ApiServer> server_;
    std::unique_ptr<httplib::Client> client_;
    int port_ = 0;
};

}  // namespace

TEST_F(ServiceTest, UnknownIdsAre404) {
    get("/api/graphs/nope", 404);
    get("/api/jobs/job-999999", 404);
    get("/api/features/0/999999", 404);
    get("/api/features/7/0", 404);
    get("/api/clusters?graph_id=nope", 404);
    post("/api/graphs/nope/prune", R"({"p_n":0.5,"p_e":0.5})", 404);
    post("/api/graphs/nope/interventions", R"({"edits":[]})", 404);
    post("/api/clusters", R"({"graph_id":"nope","node_ids":["in:0"],"label":"x"})", 404);
    get("/api/nothing/here", 404);
}

TEST_F(ServiceTest, GraphListAndGraph) {
    const json list = get("/api/graphs", 200);
    expect_valid("graph_list", list);
    ASSERT_EQ(list["graphs"].size(), 1u);
    EXPECT_EQ(list["graphs"][0]["id"], *graph_id_);
    const json g = get(graphs_path(), 200);
    expect_valid("graph", g);
    EXPECT_EQ(g["nodes"].size(), list["graphs"][0]["num_nodes"].get<std::size_t>());
    EXPECT_EQ(g["prompt"], cfg_->prompt);
}

TEST_F(ServiceTest, PruneReducesNodes) {
    const AttributionGraph full = stored_graph(true);
    const json all = post(graphs_path() + "/prune", R"({"p_n":1.0,"p_e":1.0})", 200);
    expect_valid("graph", all);
    EXPECT_EQ(all["nodes"].size(), full.nodes.size());
    EXPECT_DOUBLE_EQ(all["scores"]["completeness"].get<double>(), 1.0);

    const json small = post(graphs_path() + "/prune", R"({"p_n":0.3,"p_e":0.5})", 200);
    expect_valid("graph", small);
    EXPECT_LT(small["nodes"].size(), full.nodes.size());
    const AttributionGraph direct = prune(full, 0.3, 0.5);
    EXPECT_EQ(json::parse(graph_to_json(direct)), small);

    const json alias = post(graphs_path() + "/prune", R"({"node_mass":0.3,"edge_mass":0.5})", 200);
    EXPECT_EQ(alias, small);
}

TEST_F(ServiceTest, MalformedBodiesAre400) {
    post(graphs_path() + "/prune", "not json", 400);
    post(graphs_path() + "/prune", "[1,2]", 400);
    post(graphs_path() + "/prune", R"({"p_n":0,"p_e":0.5})", 400);
    post(graphs_path() + "/prune", R"({"p_n":0.5})", 400);
    post(graphs_path() + "/prune", R"({"p_n":"half","p_e":0.5})", 400);
    post(graphs_path() + "/interventions", "{", 400);
    post(graphs_path() + "/interventions", R"({"edits":{"a":1}})", 400);
    post(graphs_path() + "/interventions", R"({"edits":[{"node_ids":[],"action":"ablate"}]})", 400);
    post(graphs_path() + "/interventions", R"({"edits":[{"node_id":"in:0","action":"explode"}]})", 400);
    const std::string f = top_feature();
    ASSERT_FALSE(f.empty());
    post(graphs_path() + "/interventions", R"({"edits":[{"node_id":")" + f + R"(","action":"scale"}]})", 400);
    post(graphs_path() + "/interventions", R"({"edits":[], "mode":"sideways"})", 400);
    post("/api/clusters", R"({"graph_id":")" + *graph_id_ + R"("})", 400);
    post("/api/clusters", R"({"graph_id":")" + *graph_id_ + R"(","node_ids":[],"label":"x"})", 400);
    get("/api/clusters", 400);
}

TEST_F(ServiceTest, EmptyInterventionHasZeroDeltas) {
    const json sub = post(graphs_path() + "/interventions", R"({"edits":[]})", 202);
    expect_valid("job_submission", sub);
    const json job = wait_job(sub["job_id"]);
    expect_valid("job", job);
    ASSERT_EQ(job["status"], "done") << job.dump();
    const json& r = job["result"];
    expect_valid("intervention_report", r);
    ASSERT_FALSE(r["delta_all"].empty());
    for (const auto& d : r["delta_all"]) EXPECT_EQ(d.get<double>(), 0.0);
    for (const auto& l : r["logits"]) EXPECT_EQ(l["delta"].get<double>(), 0.0);
    EXPECT_TRUE(r["changed_features"].empty());
}

TEST_F(ServiceTest, InterventionMatchesDirectCall) {
    const std::string f = top_feature();
    ASSERT_FALSE(f.empty());
    const HostModel host = load_host_model(host_model_path(*cfg_, Workspace{root_}));
    const CltModel clt = load_clt(Workspace{root_}.resolve(cfg_->clt_path));
    const AttributionGraph g = stored_graph(false);
    for (const char* mode : {"frozen", "propagate"}) {
        const json body = {{"edits", {{{"node_ids", {f}}, {"action", "ablate"}}}}, {"mode", mode}};
        const json sub = post(graphs_path() + "/interventions", body.dump(), 202);
        const json job = wait_job(sub["job_id"]);
        ASSERT_EQ(job["status"], "done") << job.dump();
        json api = job["result"];
        expect_valid("intervention_report", api);
        EXPECT_EQ(api["graph_id"], *graph_id_);
        api.erase("graph_id");
        const InterventionReport direct = intervene(clt, host, g.tokens, {FeatureEdit{{f}, EditAction::ablate, 0.0}},
                                                    parse_intervention_mode(mode), attribution_config(*cfg_));
        EXPECT_EQ(api, json::parse(report_to_json(direct))) << mode;
        double moved = 0.0;
        for (const auto& d : api["delta_all"]) moved = std::max(moved, std::abs(d.get<double>()));
        EXPECT_GT(moved, 0.0);
    }
}

TEST_F(ServiceTest, UnknownNodeInEditIs404) {
    post(graphs_path() + "/interventions", R"({"edits":[{"node_id":"f:0:0:99999","action":"ablate"}]})", 404);
    post(graphs_path() + "/interventions", R"({"edits":[{"node_id":"bogus","action":"ablate"}]})", 404);
}

TEST_F(ServiceTest, FeatureRecord) {
    const fs::path store = feature_store_path(*cfg_, Workspace{root_});
    const FeatureStore all = load_store(store);
    const FeatureStoreReader reader(store);
    ASSERT_FALSE(all.records.empty());
    for (const FeatureKey k : {all.records.begin()->first, all.records.rbegin()->first}) {
        const json j = get("/api/features/" + std::to_string(k.layer) + "/" + std::to_string(k.feature), 200);
        expect_valid("feature_record", j);
        EXPECT_EQ(j, json::parse(record_to_json(reader.get(k))));
    }
}

TEST_F(ServiceTest, Clusters) {
    const AttributionGraph full = stored_graph(true);
    std::vector<std::string> a, b;
    for (const auto& n : full.nodes) {
        if (n.kind == NodeKind::input) a.push_back(n.id());
        if (n.kind == NodeKind::logit) b.push_back(n.id());
    }
    ASSERT_FALSE(a.empty());
    ASSERT_FALSE(b.empty());
    const std::string gid = *graph_id_;
    json view = get("/api/clusters?graph_id=" + gid, 200);
    expect_valid("clusters", view);
    EXPECT_TRUE(view["clusters"].empty());

    const json ca = post("/api/clusters", json{{"graph_id", gid}, {"node_ids", a}, {"label", "inputs"}}.dump(), 201);
    expect_valid("clusters", ca);
    const json cb = post("/api/clusters", json{{"graph_id", gid}, {"node_ids", b}, {"label", "logits"}}.dump(), 201);
    expect_valid("clusters", cb);
    EXPECT_NE(ca["cluster"]["id"], cb["cluster"]["id"]);

    double expected = 0.0;
    const std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    for (const auto& e : full.edges)
        if (sa.count(full.nodes[e.source].id()) && sb.count(full.nodes[e.target].id())) expected += e.weight;
    ASSERT_EQ(cb["edges"].size(), 1u);
    EXPECT_EQ(cb["edges"][0]["source"], ca["cluster"]["id"]);
    EXPECT_NEAR(cb["edges"][0]["weight"].get<double>(), expected, 1e-12);

    const json clash = post("/api/clusters", json{{"graph_id", gid}, {"node_ids", {a[0]}}, {"label", "again"}}.dump(), 409);
    EXPECT_EQ(clash["cluster_id"], ca["cluster"]["id"]);
    post("/api/clusters", json{{"graph_id", gid}, {"node_ids", {"f:9:9:9"}}, {"label", "x"}}.dump(), 400);
    post("/api/clusters", json{{"graph_id", gid}, {"node_ids", {"e:0:0", "e:0:0"}}, {"label", "x"}}.dump(), 400);

    view = get("/api/clusters?graph_id=" + gid, 200);
    EXPECT_EQ(view["clusters"].size(), 2u);
    EXPECT_EQ(view["edges"], cb["edges"]);
    fs::remove(root_ / "graphs" / (gid + ".clusters.json"));
}

TEST_F(ServiceTest, MissingModelsAre409) {
    const fs::path other = root_.string() + "_bare";
    fs::remove_all(other);
    fs::create_directories(other / "graphs");
    fs::copy_file(root_ / "graphs" / (*graph_id_ + ".json"), other / "graphs" / (*graph_id_ + ".json"));
    ApiServer bare(Workspace{other}, *cfg_);
    const int p = bare.start("127.0.0.1", 0);
    httplib::Client c("127.0.0.1", p);
    auto r = c.Post(graphs_path() + "/interventions", R"({"edits":[]})", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 409);
    EXPECT_NE(r->body.find("clt-forge"), std::string::npos) << r->body;
    r = c.Get("/api/features/0/0");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 404);
    r = c.Get("/");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_NE(r->body.find("/api/graphs"), std::string::npos);
    bare.stop();
    fs::remove_all(other);
}

TEST_F(ServiceTest, StaticUiMount) {
    const fs::path ui = root_ / "ui";
    fs::create_directories(ui);
    std::ofstream(ui / "index.html") << "<html>graph explorer</html>";
    ApiServer with_ui(Workspace{root_}, *cfg_);
    const int p = with_ui.start("127.0.0.1", 0);
    httplib::Client c("127.0.0.1", p);
    auto r = c.Get("/index.html");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->body, "<html>graph explorer</html>");
    r = c.Get("/api/graphs");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    with_ui.stop();
    fs::remove_all(ui);
}

TEST_F(ServiceTest, JobsArePersisted) {
    const json sub = post(graphs_path() + "/interventions", R"({"edits":[]})", 202);
    const json job = wait_job(sub["job_id"]);
    ASSERT_EQ(job["status"], "done");
    const fs::path rec = root_ / "jobs" / (sub["job_id"].get<std::string>() + ".json");
    ASSERT_TRUE(fs::exists(rec));
    json on_disk = json::parse(slurp(rec));
    expect_valid("job", on_disk);
    EXPECT_EQ(on_disk["status"], "done");
    const json result = json::parse(slurp(root_ / "jobs" / on_disk["result_ref"].get<std::string>()));
    EXPECT_EQ(result, job["result"]);
}

// --- job queue --------------------------------------------------------------

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / (name + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(JobQueue, LifecycleAndConflicts) {
    TempDir dir("cltforge_jobs_");
    JobQueue q(dir.path);
    std::promise<void> release;
    std::shared_future<void> gate = release.get_future().share();
    std::atomic<bool> started{false};
    const auto first = q.submit(JobKind::intervention, "g1", [&] {
        started = true;
        gate.wait();
        return std::string(R"({"ok":true})");
    });
    EXPECT_FALSE(first.conflict);
    const auto dup = q.submit(JobKind::intervention, "g1", [] { return std::string("{}"); });
    EXPECT_TRUE(dup.conflict);
    EXPECT_EQ(dup.record.id, first.record.id);
    // Same target, other kind; and same kind, other target: no conflict.
    const auto other_kind = q.submit(JobKind::prune, "g1", [] { return std::string("{}"); });
    EXPECT_FALSE(other_kind.conflict);
    const auto queued = q.submit(JobKind::intervention, "g2", [] { return std::string(R"({"n":2})"); });
    EXPECT_FALSE(queued.conflict);
    EXPECT_NE(queued.record.id, first.record.id);

    while (!started) std::this_thread::yield();
    EXPECT_EQ(q.get(first.record.id)->status, JobStatus::running);
    EXPECT_EQ(q.get(queued.record.id)->status, JobStatus::queued);
    EXPECT_FALSE(q.wait(first.record.id, 0.05) && q.get(first.record.id)->status == JobStatus::done);
    release.set_value();

    const auto done = q.wait(first.record.id, 30);
    ASSERT_TRUE(done);
    EXPECT_EQ(done->status, JobStatus::done);
    EXPECT_EQ(*q.result(first.record.id), R"({"ok":true})");
    EXPECT_EQ(q.wait(queued.record.id, 30)->status, JobStatus::done);
    EXPECT_EQ(*q.result(queued.record.id), R"({"n":2})");
    EXPECT_GE(done->updated, done->created);
    // A finished job no longer blocks its target.
    const auto again = q.submit(JobKind::intervention, "g1", [] { return std::string("{}"); });
    EXPECT_FALSE(again.conflict);
    q.wait(again.record.id, 30);
}

TEST(JobQueue, FailuresAreRecorded) {
    TempDir dir("cltforge_jobs_fail_");
    JobQueue q(dir.path);
    const auto sub = q.submit(JobKind::autointerp, "", []() -> std::string { throw DataError("boom"); });
    const auto r = q.wait(sub.record.id, 30);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, JobStatus::failed);
    ASSERT_TRUE(r->error);
    EXPECT_NE(r->error->find("boom"), std::string::npos);
    EXPECT_FALSE(q.result(sub.record.id));
    const JobRecord disk = job_from_json(slurp(dir.path / (sub.record.id + ".json")));
    EXPECT_EQ(disk.status, JobStatus::failed);
}

TEST(JobQueue, RestartMarksUnfinishedJobsFailed) {
    TempDir dir("cltforge_jobs_restart_");
    auto write = [&](const std::string& id, JobStatus st) {
        JobRecord r;
        r.id = id;
        r.kind = JobKind::intervention;
        r.status = st;
        r.target = "g";
        r.created = r.updated = 1.0;
        std::ofstream(dir.path / (id + ".json")) << job_to_json(r);
    };
    write("job-000003", JobStatus::running);
    write("job-000004", JobStatus::queued);
    write("job-000005", JobStatus::done);
    JobQueue q(dir.path);
    for (const char* id : {"job-000003", "job-000004"}) {
        const auto r = q.get(id);
        ASSERT_TRUE(r) << id;
        EXPECT_EQ(r->status, JobStatus::failed);
        ASSERT_TRUE(r->error);
        EXPECT_NE(r->error->find("interrupted"), std::string::npos);
        EXPECT_EQ(job_from_json(slurp(dir.path / (std::string(id) + ".json"))).status, JobStatus::failed);
    }
    EXPECT_EQ(q.get("job-000005")->status, JobStatus::done);
    // Interrupted jobs do not block new ones, and ids continue past the old ones.
    const auto sub = q.submit(JobKind::intervention, "g", [] { return std::string("{}"); });
    EXPECT_FALSE(sub.conflict);
    EXPECT_EQ(sub.record.id, "job-000006");
    q.wait(sub.record.id, 30);
}

TEST(JobQueue, RecordJsonRoundTrip) {
    JobRecord r;
    r.id = "job-000042";
    r.kind = JobKind::prune;
    r.status = JobStatus::done;
    r.target = "gabc@0.5,0.9";
    r.result_ref = "job-000042.result.json";
    r.created = 1.5;
    r.updated = 2.25;
    const std::string text = job_to_json(r);
    expect_valid("job", json::parse(text));
    const JobRecord back = job_from_json(text);
    EXPECT_EQ(back.id, r.id);
    EXPECT_EQ(back.kind, r.kind);
    EXPECT_EQ(back.status, r.status);
    EXPECT_EQ(back.target, r.target);
    EXPECT_EQ(back.result_ref, r.result_ref);
    EXPECT_FALSE(back.error);
    EXPECT_EQ(back.created, r.created);
    EXPECT_EQ(back.updated, r.updated);
}

TEST(Schemas, RejectMutatedDocuments) {
    AttributionGraph g;
    g.prompt = "a b";
    g.tokens = {0, 1};
    AttributionNode in;
    in.kind = NodeKind::input;
    in.token = 0;
    g.nodes.push_back(in);
    const json good = json::parse(graph_to_json(g));
    const auto s = schema("graph");
    EXPECT_TRUE(s.valid(good)) << good.dump();
    json bad = good;
    bad["nodes"][0]["kind"] = "neuron";
    EXPECT_FALSE(s.valid(bad));
    bad = good;
    bad["nodes"][0]["id"] = "x:1";
    EXPECT_FALSE(s.valid(bad));
    bad = good;
    bad["scores"]["replacement"] = 1.5;
    EXPECT_FALSE(s.valid(bad));
    bad = good;
    bad.erase("edges");
    EXPECT_FALSE(s.valid(bad));
    bad = good;
    bad["extra"] = 1;
    EXPECT_FALSE(s.valid(bad));
    bad = good;
    bad["logit_position"] = 1.5;
    EXPECT_FALSE(s.valid(bad));
    EXPECT_FALSE(schema("job").valid(json{{"id", "job-1"}}));
    EXPECT_FALSE(schema("error").valid(json{{"error", ""}}));
}
