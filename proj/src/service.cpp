// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <regex>
#include <set>

#include <httplib.h>
#include <json.hpp>

#include "cltforge/attribution.hpp"
#include "cltforge/autointerp.hpp"
#include "cltforge/binary_io.hpp"
#include "cltforge/error.hpp"
#include "cltforge/pipeline.hpp"

namespace cltforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

constexpr JobKind kAllKinds[] = {JobKind::intervention, JobKind::prune, JobKind::autointerp};

bool finished(JobStatus s) { return s == JobStatus::done || s == JobStatus::failed; }

bool allowed(JobStatus from, JobStatus to) {
    switch (from) {
        case JobStatus::queued: return to == JobStatus::running || to == JobStatus::failed;
        case JobStatus::running: return to == JobStatus::done || to == JobStatus::failed;
        default: return false;
    }
}

JobKind parse_kind(const std::string& s) {
    for (JobKind k : kAllKinds)
        if (job_kind_name(k) == s) return k;
    throw InputError("unknown job kind '" + s + "'");
}

JobStatus parse_status(const std::string& s) {
    for (JobStatus st : {JobStatus::queued, JobStatus::running, JobStatus::done, JobStatus::failed})
        if (job_status_name(st) == s) return st;
    throw InputError("unknown job status '" + s + "'");
}

}  // namespace

std::string job_kind_name(JobKind k) {
    switch (k) {
        case JobKind::intervention: return "intervention";
        case JobKind::prune: return "prune";
        case JobKind::autointerp: return "autointerp";
    }
    return "?";
}

std::string job_status_name(JobStatus s) {
    switch (s) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::done: return "done";
        case JobStatus::failed: return "failed";
    }
    return "?";
}

std::string job_to_json(const JobRecord& r) {
    json j;
    j["id"] = r.id;
    j["kind"] = job_kind_name(r.kind);
    j["status"] = job_status_name(r.status);
    j["target"] = r.target;
    j["result_ref"] = r.result_ref ? json(*r.result_ref) : json(nullptr);
    j["error"] = r.error ? json(*r.error) : json(nullptr);
    j["created"] = r.created;
    j["updated"] = r.updated;
    return j.dump();
}

JobRecord job_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        JobRecord r;
        r.id = j.at("id").get<std::string>();
        r.kind = parse_kind(j.at("kind").get<std::string>());
        r.status = parse_status(j.at("status").get<std::string>());
        r.target = j.at("target").get<std::string>();
        if (!j.at("result_ref").is_null()) r.result_ref = j.at("result_ref").get<std::string>();
        if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
        r.created = j.at("created").get<double>();
        r.updated = j.at("updated").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed job record: ") + e.what());
    }
}

// --- JobQueue ----------------------------------------------------------------------

JobQueue::JobQueue(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    static const std::regex name(R"(job-(\d+)\.json)");
    for (const auto& entry : fs::directory_iterator(dir_)) {
        std::smatch m;
        const std::string file = entry.path().filename().string();
        if (!std::regex_match(file, m, name)) continue;
        JobRecord r;
        try {
            r = job_from_json(read_text(entry.path()));
        } catch (const Error&) {
            continue;
        }
        next_id_ = std::max<std::uint64_t>(next_id_, std::stoull(m[1]) + 1);
        if (!finished(r.status)) {
            r.status = JobStatus::failed;
            r.error = "interrupted: the service stopped before the job finished";
            r.updated = now_seconds();
            persist(r);
        }
        jobs_.emplace(r.id, r);
    }
    for (JobKind k : kAllKinds) workers_.emplace_back([this, k] { run(k); });
}

JobQueue::~JobQueue() {
    {
        std::lock_guard lock(mu_);
        stopping_ = true;
    }
    changed_.notify_all();
    for (auto& t : workers_) t.join();
}

void JobQueue::persist(const JobRecord& r) const { write_text_atomic(dir_ / (r.id + ".json"), job_to_json(r)); }

JobQueue::Submission JobQueue::submit(JobKind kind, const std::string& target, Work work) {
    std::unique_lock lock(mu_);
    for (const auto& [id, r] : jobs_)
        if (r.kind == kind && r.target == target && !finished(r.status)) return {r, true};
    char buf[32];
    std::snprintf(buf, sizeof buf, "job-%06llu", static_cast<unsigned long long>(next_id_++));
    JobRecord r;
    r.id = buf;
    r.kind = kind;
    r.target = target;
    r.created = r.updated = now_seconds();
    persist(r);
    jobs_.emplace(r.id, r);
    pending_[kind].push_back({r.id, std::move(work)});
    lock.unlock();
    changed_.notify_all();
    return {r, false};
}

std::optional<JobRecord> JobQueue::get(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::string> JobQueue::result(const std::string& id) const {
    const auto r = get(id);
    if (!r || !r->result_ref) return std::nullopt;
    return read_text(dir_ / *r->result_ref);
}

std::optional<JobRecord> JobQueue::wait(const std::string& id, double timeout_seconds) const {
    std::unique_lock lock(mu_);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
    changed_.wait_until(lock, deadline, [&] {
        const auto it = jobs_.find(id);
        return it == jobs_.end() || finished(it->second.status);
    });
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
}

void JobQueue::transition(const std::string& id, JobStatus to, std::optional<std::string> result_ref,
                          std::optional<std::string> error) {
    {
        std::lock_guard lock(mu_);
        JobRecord& r = jobs_.at(id);
        if (!allowed(r.status, to))
            throw StateError("job " + id + " cannot move from " + job_status_name(r.status) + " to " +
                             job_status_name(to));
        r.status = to;
        r.result_ref = std::move(result_ref);
        r.error = std::move(error);
        r.updated = now_seconds();
        persist(r);
    }
    changed_.notify_all();
}

void JobQueue::run(JobKind kind) {
    for (;;) {
        Task task;
        {
            std::unique_lock lock(mu_);
            changed_.wait(lock, [&] { return stopping_ || !pending_[kind].empty(); });
            if (stopping_) return;
            task = std::move(pending_[kind].front());
            pending_[kind].pop_front();
        }
        transition(task.id, JobStatus::running, std::nullopt, std::nullopt);
        try {
            const std::string out = task.work();
            const std::string ref = task.id + ".result.json";
            write_text_atomic(dir_ / ref, out);
            transition(task.id, JobStatus::done, ref, std::nullopt);
        } catch (const std::exception& e) {
            transition(task.id, JobStatus::failed, std::nullopt, std::string(e.what()));
        }
    }
}

// --- ApiServer ---------------------------------------------------------------------

struct ApiServer::Models {
    HostModel host;
    CltModel clt;
};

namespace {

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_raw(httplib::Response& res, int status, const std::string& body) {
    res.status = status;
    res.set_content(body, "application/json");
}

void fail(httplib::Response& res, int status, const std::string& msg) { reply(res, status, {{"error", msg}}); }

std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
    json j = json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        fail(res, 400, "request body must be a JSON object");
        return std::nullopt;
    }
    return j;
}

std::optional<double> mass_field(const json& j, const char* a, const char* b) {
    const json* v = j.contains(a) ? &j[a] : j.contains(b) ? &j[b] : nullptr;
    if (!v || !v->is_number()) return std::nullopt;
    const double x = v->get<double>();
    if (!(x > 0.0 && x <= 1.0)) return std::nullopt;
    return x;
}

std::string format_mass(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

json cluster_view(const std::string& graph_id, const json& clusters, const AttributionGraph& g) {
    std::map<std::string, std::string> owner;
    for (const auto& c : clusters)
        for (const auto& n : c.at("node_ids")) owner[n.get<std::string>()] = c.at("id").get<std::string>();
    std::map<std::pair<std::string, std::string>, double> agg;
    for (const auto& e : g.edges) {
        const auto s = owner.find(g.nodes[e.source].id());
        const auto t = owner.find(g.nodes[e.target].id());
        if (s == owner.end() || t == owner.end() || s->second == t->second) continue;
        agg[{s->second, t->second}] += e.weight;
    }
    json edges = json::array();
    for (const auto& [k, w] : agg) edges.push_back({{"source", k.first}, {"target", k.second}, {"weight", w}});
    return {{"graph_id", graph_id}, {"clusters", clusters}, {"edges", edges}};
}

}  // namespace

ApiServer::ApiServer(Workspace ws, RunConfig cfg)
    : ws_(std::move(ws)), cfg_(std::move(cfg)), svr_(std::make_unique<httplib::Server>()) {
    ws_.ensure();
    jobs_ = std::make_unique<JobQueue>(ws_.jobs());
    routes();
}

ApiServer::~ApiServer() { stop(); }

std::shared_ptr<const ApiServer::Models> ApiServer::models() {
    std::lock_guard lock(models_mu_);
    if (!models_) {
        const fs::path host = host_model_path(cfg_, ws_);
        const fs::path clt = ws_.resolve(cfg_.clt_path);
        require_artifact(host, "clt-forge cache");
        require_artifact(clt, "clt-forge train");
        auto m = std::make_shared<Models>();
        m->host = load_host_model(host);
        m->clt = load_clt(clt);
        models_ = std::move(m);
    }
    return models_;
}

void ApiServer::routes() {
    auto& s = *svr_;
    s.set_payload_max_length(4 << 20);
    const fs::path graphs = ws_.graphs();
    auto graph_file = [graphs](const std::string& id) { return graphs / (id + ".json"); };
    auto full_file = [graphs](const std::string& id) {
        const fs::path full = graphs / (id + ".full.json");
        return fs::exists(full) ? full : graphs / (id + ".json");
    };

    s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        fail(res, 500, msg);
    });
    s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty()) fail(res, res.status, "no route for " + req.method + " " + req.path);
        return httplib::Server::HandlerResponse::Handled;
    });

    s.Get("/api/graphs", [graphs](const httplib::Request&, httplib::Response& res) {
        std::vector<fs::path> files;
        if (fs::exists(graphs))
            for (const auto& e : fs::directory_iterator(graphs)) {
                const std::string name = e.path().filename().string();
                if (e.path().extension() != ".json" || name.find(".full.") != std::string::npos ||
                    name.find(".clusters.") != std::string::npos)
                    continue;
                files.push_back(e.path());
            }
        std::sort(files.begin(), files.end());
        json list = json::array();
        for (const auto& f : files) {
            const json g = json::parse(read_text(f), nullptr, false);
            if (g.is_discarded()) continue;
            list.push_back({{"id", f.stem().string()},
                            {"prompt", g.value("prompt", "")},
                            {"num_nodes", g.value("nodes", json::array()).size()},
                            {"num_edges", g.value("edges", json::array()).size()},
                            {"replacement_score", g["scores"].value("replacement", 0.0)},
                            {"completeness", g["scores"].value("completeness", 0.0)},
                            {"node_mass", g["pruning"].value("node_mass", 1.0)},
                            {"edge_mass", g["pruning"].value("edge_mass", 1.0)}});
        }
        reply(res, 200, {{"graphs", list}});
    });

    s.Get(R"(/api/graphs/([A-Za-z0-9_-]+))", [graph_file](const httplib::Request& req, httplib::Response& res) {
        const fs::path f = graph_file(req.matches[1]);
        if (!fs::exists(f)) return fail(res, 404, "unknown graph '" + std::string(req.matches[1]) + "'");
        reply_raw(res, 200, read_text(f));
    });

    s.Post(R"(/api/graphs/([A-Za-z0-9_-]+)/prune)", [this, graph_file, full_file](const httplib::Request& req,
                                                                                 httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!fs::exists(graph_file(id))) return fail(res, 404, "unknown graph '" + id + "'");
        const auto body = parse_body(req, res);
        if (!body) return;
        const auto pn = mass_field(*body, "p_n", "node_mass");
        const auto pe = mass_field(*body, "p_e", "edge_mass");
        if (!pn || !pe) return fail(res, 400, "p_n and p_e must be numbers in (0, 1]");
        const fs::path src = full_file(id);
        const auto sub = jobs_->submit(JobKind::prune, id + "@" + format_mass(*pn) + "," + format_mass(*pe),
                                       [src, pn = *pn, pe = *pe] {
                                           return graph_to_json(prune(graph_from_json(read_text(src)), pn, pe));
                                       });
        const auto done = jobs_->wait(sub.record.id, 120.0);
        if (!done || done->status != JobStatus::done)
            return fail(res, 500, done && done->error ? *done->error : "prune job did not finish");
        res.set_header("X-Job-Id", done->id);
        reply_raw(res, 200, *jobs_->result(done->id));
    });

    s.Post(R"(/api/graphs/([A-Za-z0-9_-]+)/interventions)", [this, graph_file](const httplib::Request& req,
                                                                               httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!fs::exists(graph_file(id))) return fail(res, 404, "unknown graph '" + id + "'");
        const auto body = parse_body(req, res);
        if (!body) return;
        std::vector<FeatureEdit> edits;
        InterventionMode mode = InterventionMode::frozen;
        try {
            if (body->contains("mode")) mode = parse_intervention_mode(body->at("mode").get<std::string>());
            const json list = body->value("edits", json::array());
            if (!list.is_array()) throw InputError("edits must be an array");
            for (const auto& e : list) {
                FeatureEdit fe;
                if (e.contains("node_ids")) fe.node_ids = e.at("node_ids").get<std::vector<std::string>>();
                else fe.node_ids = {e.at("node_id").get<std::string>()};
                if (fe.node_ids.empty()) throw InputError("an edit needs at least one node id");
                fe.action = parse_edit_action(e.at("action").get<std::string>());
                if (fe.action != EditAction::ablate) fe.value = e.at("value").get<double>();
                edits.push_back(std::move(fe));
            }
        } catch (const json::exception& e) {
            return fail(res, 400, std::string("malformed intervention: ") + e.what());
        } catch (const InputError& e) {
            return fail(res, 400, e.what());
        }
        std::shared_ptr<const Models> m;
        try {
            m = models();
        } catch (const StateError& e) {
            return fail(res, 409, e.what());
        }
        const AttributionGraph g = graph_from_json(read_text(graph_file(id)));
        try {
            validate_edits(m->clt, m->host, g.tokens, edits);
        } catch (const LookupError& e) {
            return fail(res, 404, e.what());
        } catch (const InputError& e) {
            return fail(res, 400, e.what());
        }
        const AttributionConfig ac = attribution_config(cfg_);
        const auto sub = jobs_->submit(JobKind::intervention, id, [m, tokens = g.tokens, edits, mode, ac, id] {
            json j = json::parse(report_to_json(intervene(m->clt, m->host, tokens, edits, mode, ac)));
            j["graph_id"] = id;
            return j.dump();
        });
        if (sub.conflict)
            return reply(res, 409, {{"error", "an intervention on graph '" + id + "' is already " +
                                                  job_status_name(sub.record.status)},
                                    {"job_id", sub.record.id}});
        reply(res, 202, {{"job_id", sub.record.id}, {"status", job_status_name(sub.record.status)}});
    });

    s.Get(R"(/api/jobs/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const auto r = jobs_->get(req.matches[1]);
        if (!r) return fail(res, 404, "unknown job '" + std::string(req.matches[1]) + "'");
        json j = json::parse(job_to_json(*r));
        if (r->status == JobStatus::done) j["result"] = json::parse(*jobs_->result(r->id));
        reply(res, 200, j);
    });

    s.Get(R"(/api/features/(\d+)/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        const fs::path p = feature_store_path(cfg_, ws_);
        if (!fs::exists(p)) return fail(res, 404, "no feature store at " + p.string() + " (run clt-forge autointerp)");
        const std::string ls = req.matches[1], fs_ = req.matches[2];
        if (ls.size() > 9 || fs_.size() > 9) return fail(res, 404, "unknown feature");
        const FeatureKey key{static_cast<std::uint32_t>(std::stoul(ls)), static_cast<std::uint32_t>(std::stoul(fs_))};
        const FeatureStoreReader reader(p);
        if (!reader.contains(key)) return fail(res, 404, "unknown feature " + ls + "/" + fs_);
        reply_raw(res, 200, record_to_json(reader.get(key)));
    });

    s.Post("/api/clusters", [this, graph_file, full_file](const httplib::Request& req, httplib::Response& res) {
        const auto body = parse_body(req, res);
        if (!body) return;
        std::string gid, label;
        std::vector<std::string> members;
        try {
            gid = body->at("graph_id").get<std::string>();
            label = body->at("label").get<std::string>();
            members = body->at("node_ids").get<std::vector<std::string>>();
        } catch (const json::exception&) {
            return fail(res, 400, "expected {graph_id: string, node_ids: [string], label: string}");
        }
        if (members.empty()) return fail(res, 400, "a cluster needs at least one node");
        if (!std::regex_match(gid, std::regex("[A-Za-z0-9_-]+")) || !fs::exists(graph_file(gid)))
            return fail(res, 404, "unknown graph '" + gid + "'");
        const AttributionGraph g = graph_from_json(read_text(full_file(gid)));
        std::set<std::string> uniq;
        for (const auto& m : members) {
            if (!g.find(m)) return fail(res, 400, "node '" + m + "' is not in graph '" + gid + "'");
            if (!uniq.insert(m).second) return fail(res, 400, "node '" + m + "' is listed twice");
        }
        std::lock_guard lock(clusters_mu_);
        const fs::path cf = ws_.graphs() / (gid + ".clusters.json");
        json clusters = fs::exists(cf) ? json::parse(read_text(cf)) : json::array();
        for (const auto& c : clusters)
            for (const auto& n : c.at("node_ids"))
                if (uniq.count(n.get<std::string>()))
                    return reply(res, 409, {{"error", "node '" + n.get<std::string>() + "' already belongs to cluster '" +
                                                          c.at("id").get<std::string>() + "'"},
                                            {"cluster_id", c.at("id")}});
        const std::string cid = "c" + std::to_string(clusters.size() + 1);
        clusters.push_back({{"id", cid}, {"label", label}, {"node_ids", members}});
        write_text_atomic(cf, clusters.dump());
        json view = cluster_view(gid, clusters, g);
        view["cluster"] = clusters.back();
        reply(res, 201, view);
    });

    s.Get("/api/clusters", [this, graph_file, full_file](const httplib::Request& req, httplib::Response& res) {
        if (!req.has_param("graph_id")) return fail(res, 400, "graph_id query parameter is required");
        const std::string gid = req.get_param_value("graph_id");
        if (!std::regex_match(gid, std::regex("[A-Za-z0-9_-]+")) || !fs::exists(graph_file(gid)))
            return fail(res, 404, "unknown graph '" + gid + "'");
        std::lock_guard lock(clusters_mu_);
        const fs::path cf = ws_.graphs() / (gid + ".clusters.json");
        const json clusters = fs::exists(cf) ? json::parse(read_text(cf)) : json::array();
        reply(res, 200, cluster_view(gid, clusters, graph_from_json(read_text(full_file(gid)))));
    });

    s.Post("/api/autointerp", [this](const httplib::Request&, httplib::Response& res) {
        const RunConfig cfg = cfg_;
        const Workspace ws = ws_;
        const auto sub = jobs_->submit(JobKind::autointerp, "", [cfg, ws] {
            const auto rep = run_autointerp(cfg, ws, static_cast<std::size_t>(cfg.num_workers));
            return json{{"store", rep.store_path.string()}, {"records", rep.records}, {"tokens_scanned", rep.tokens_scanned}}
                .dump();
        });
        if (sub.conflict) return reply(res, 409, {{"error", "autointerp is already running"}, {"job_id", sub.record.id}});
        reply(res, 202, {{"job_id", sub.record.id}, {"status", job_status_name(sub.record.status)}});
    });

    std::optional<fs::path> ui;
    if (cfg_.static_dir) ui = ws_.resolve(*cfg_.static_dir);
    else if (fs::exists(ws_.root / "ui")) ui = ws_.root / "ui";
    if (ui && fs::is_directory(*ui)) {
        s.set_mount_point("/", ui->string());
    } else {
        s.Get("/", [](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"service", "clt-forge"},
                             {"endpoints", {"/api/graphs", "/api/jobs/{id}", "/api/features/{layer}/{index}",
                                            "/api/clusters"}}});
        });
    }
}

int ApiServer::start(const std::string& host, int port) {
    if (port == 0) port_ = svr_->bind_to_any_port(host);
    else port_ = svr_->bind_to_port(host, port) ? port : -1;
    if (port_ < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { svr_->listen_after_bind(); });
    svr_->wait_until_ready();
    return port_;
}

void ApiServer::serve_forever(const std::string& host, int port) {
    start(host, port);
    if (thread_.joinable()) thread_.join();
}

void ApiServer::stop() {
    if (svr_) svr_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace cltforge
