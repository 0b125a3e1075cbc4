// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// clt-forge <cache|train|autointerp|attribute|finetune|serve> --config <path> [--workers N] [--seed S]

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cltforge/config.hpp"
#include "cltforge/error.hpp"
#include "cltforge/pipeline.hpp"
#include "cltforge/service.hpp"
#include "cltforge/workspace.hpp"

using namespace cltforge;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void log_line(std::string_view msg) { std::cerr << "[clt-forge] " << msg << "\n"; }

// Exit status by failure class.
enum Exit { ok = 0, failure = 1, bad_config = 2, missing_input = 3 };

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"clt-forge: cache, train, interpret and attribute cross-layer transcoders"};
    app.require_subcommand(1);
    app.fallthrough();

    std::optional<std::string> config_path;
    std::optional<std::string> workspace_root;
    std::optional<std::size_t> workers;
    std::optional<std::int64_t> seed;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "run config file (key = value lines)");
    app.add_option("--workspace", workspace_root, "workspace root (default $CLT_FORGE_WORKSPACE or ./workspace)");
    app.add_option("--workers", workers, "number of in-process workers")->check(CLI::PositiveNumber);
    app.add_option("--seed", seed, "override the config seed");
    app.add_option("--set", overrides, "override one config key: --set key=value (repeatable)");

    auto* cache = app.add_subcommand("cache", "train the toy host and write the quantized activation cache");
    auto* train = app.add_subcommand("train", "train a CLT on the cache");
    auto* autointerp = app.add_subcommand("autointerp", "collect top activations and explanations per feature");
    auto* attribute = app.add_subcommand("attribute", "build, prune and save an attribution graph");
    auto* finetune = app.add_subcommand("finetune", "low-rank finetune of a trained CLT's decoders");
    auto* serve = app.add_subcommand("serve", "serve graphs, features and interventions over HTTP");
    auto* show = app.add_subcommand("show-config", "print the resolved config");

    std::optional<std::string> prompt;
    attribute->add_option("--prompt", prompt, "prompt text (defaults to the config prompt)");
    std::optional<std::string> host;
    std::optional<int> port;
    double duration = 0.0;
    serve->add_option("--host", host, "bind address (default serve_host)");
    serve->add_option("--port", port, "port, 0 for any free port (default serve_port)");
    serve->add_option("--duration", duration, "stop after this many seconds (0 = until interrupted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // --help and --version exit 0; every usage error is a bad_config.
        return app.exit(e) == 0 ? ok : bad_config;
    }

    try {
        RunConfig cfg = config_path ? parse_config(*config_path) : RunConfig{};
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
            set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
        }
        if (seed) cfg.seed = *seed;
        if (workers) cfg.num_workers = static_cast<std::int64_t>(*workers);
        cfg.validate();
        const std::size_t nw = static_cast<std::size_t>(cfg.num_workers);
        const Workspace ws = Workspace::locate(workspace_root ? std::optional<std::filesystem::path>(*workspace_root)
                                                              : std::nullopt);
        if (cfg.device != "cpu") log_line("device '" + cfg.device + "' is not available here; running on the CPU");
        if (cfg.log_to_wandb) log_line("log_to_wandb is ignored; metrics are written to " + ws.metrics().string());

        if (*show) {
            std::cout << serialize_config(cfg);
        } else if (*cache) {
            const auto rep = run_cache(cfg, ws, log_line);
            std::cout << rep.dir.string() << "\n";
        } else if (*train) {
            const auto rep = run_train(cfg, ws, nw, log_line);
            std::cout << rep.selected_checkpoint.string() << "\n";
        } else if (*finetune) {
            const auto rep = run_finetune(cfg, ws, nw, log_line);
            std::cout << rep.final_checkpoint.string() << "\n";
        } else if (*autointerp) {
            const auto rep = run_autointerp(cfg, ws, nw, log_line);
            std::cout << rep.store_path.string() << "\n";
        } else if (*attribute) {
            const auto rep = run_attribute(cfg, ws, prompt, log_line);
            std::cout << rep.graph_path.string() << "\n";
        } else if (*serve) {
            ApiServer server(ws, cfg);
            const std::string h = host ? *host : cfg.serve_host;
            const int p = server.start(h, port ? *port : static_cast<int>(cfg.serve_port));
            log_line("serving " + ws.root.string() + " on http://" + h + ":" + std::to_string(p));
            std::cout << "http://" << h << ":" << p << std::endl;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            const auto t0 = std::chrono::steady_clock::now();
            while (!g_stop) {
                std::this_thread::sleep_for(std::chrono::milliseconds(100));
                if (duration > 0 &&
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= duration)
                    break;
            }
            server.stop();
        }
    } catch (const ConfigError& e) {
        log_line(std::string("config error: ") + e.what());
        return bad_config;
    } catch (const InputError& e) {
        log_line(std::string("input error: ") + e.what());
        return bad_config;
    } catch (const StateError& e) {
        log_line(std::string("error: ") + e.what());
        return missing_input;
    } catch (const std::exception& e) {
        log_line(std::string("error: ") + e.what());
        return failure;
    }
    return ok;
}
