// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Background jobs and the JSON HTTP API served from a workspace.
//
//   GET  /api/graphs                      graph summaries
//   GET  /api/graphs/{id}                 graph JSON
//   POST /api/graphs/{id}/prune           {p_n, p_e} -> pruned graph
//   POST /api/graphs/{id}/interventions   {edits[], mode} -> 202 {job_id}
//   GET  /api/jobs/{id}                   job record (result inlined when done)
//   GET  /api/features/{layer}/{index}    feature record
//   POST /api/clusters                    {graph_id, node_ids, label}
//   GET  /api/clusters?graph_id=          clusters of a graph
//   POST /api/autointerp                  run the autointerp stage as a job
//
// Unknown ids answer 404, malformed bodies 400, conflicting jobs and
// overlapping clusters 409. Every error body is {"error": message}.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cltforge/config.hpp"
#include "cltforge/workspace.hpp"

namespace httplib {
class Server;
}

namespace cltforge {

enum class JobKind { intervention, prune, autointerp };
enum class JobStatus { queued, running, done, failed };

std::string job_kind_name(JobKind k);
std::string job_status_name(JobStatus s);

struct JobRecord {
    std::string id;
    JobKind kind = JobKind::intervention;
    JobStatus status = JobStatus::queued;
    std::string target;                  ///< graph id, or empty
    std::optional<std::string> result_ref;  ///< result file name inside jobs/
    std::optional<std::string> error;
    double created = 0.0;  // unix seconds
    double updated = 0.0;
};

std::string job_to_json(const JobRecord& r);
JobRecord job_from_json(const std::string& text);

/// One consumer thread per job kind. Records and results are written to the
/// jobs directory atomically on every transition; records left queued or
/// running by an earlier process are marked failed on startup.
class JobQueue {
public:
    using Work = std::function<std::string()>;  ///< returns the result JSON

    explicit JobQueue(std::filesystem::path dir);
    ~JobQueue();
    JobQueue(const JobQueue&) = delete;
    JobQueue& operator=(const JobQueue&) = delete;

    /// Queues `work` unless a job of this kind and target is still queued or
    /// running, in which case that job is returned with conflict = true.
    struct Submission {
        JobRecord record;
        bool conflict = false;
    };
    Submission submit(JobKind kind, const std::string& target, Work work);

    std::optional<JobRecord> get(const std::string& id) const;
    /// Result JSON of a finished job.
    std::optional<std::string> result(const std::string& id) const;
    /// Blocks until the job is done or failed, or the timeout passes.
    std::optional<JobRecord> wait(const std::string& id, double timeout_seconds) const;

private:
    struct Task {
        std::string id;
        Work work;
    };
    void run(JobKind kind);
    void persist(const JobRecord& r) const;
    void transition(const std::string& id, JobStatus to, std::optional<std::string> result_ref,
                    std::optional<std::string> error);

    std::filesystem::path dir_;
    mutable std::mutex mu_;
    mutable std::condition_variable changed_;
    std::map<std::string, JobRecord> jobs_;
    std::map<JobKind, std::deque<Task>> pending_;
    std::uint64_t next_id_ = 1;
    bool stopping_ = false;
    std::vector<std::thread> workers_;
};

class ApiServer {
public:
    ApiServer(Workspace ws, RunConfig cfg);
    ~ApiServer();
    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread.
    int start(const std::string& host, int port);
    /// Serves on the calling thread until stop().
    void serve_forever(const std::string& host, int port);
    void stop();
    int port() const noexcept { return port_; }

    JobQueue& jobs() noexcept { return *jobs_; }

private:
    struct Models;
    void routes();
    std::shared_ptr<const Models> models();

    Workspace ws_;
    RunConfig cfg_;
    std::unique_ptr<httplib::Server> svr_;
    std::unique_ptr<JobQueue> jobs_;
    std::thread thread_;
    int port_ = 0;
    std::mutex models_mu_;
    std::shared_ptr<const Models> models_;
    std::mutex clusters_mu_;
};

}  // namespace cltforge
