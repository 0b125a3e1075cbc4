// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk layout shared by the CLI and the service:
//
//   <root>/cache        activation cache + host model
//   <root>/checkpoints  CLT checkpoints
//   <root>/features     autointerp stores
//   <root>/graphs       attribution graphs and clusters
//   <root>/jobs         job records
//   <root>/metrics      training metric logs and run summaries

#pragma once

#include <filesystem>
#include <optional>
#include <string>

namespace cltforge {

inline constexpr const char* workspace_env = "CLT_FORGE_WORKSPACE";

struct Workspace {
    std::filesystem::path root;

    std::filesystem::path cache() const { return root / "cache"; }
    std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    std::filesystem::path features() const { return root / "features"; }
    std::filesystem::path graphs() const { return root / "graphs"; }
    std::filesystem::path jobs() const { return root / "jobs"; }
    std::filesystem::path metrics() const { return root / "metrics"; }

    /// Relative paths are taken from the root.
    std::filesystem::path resolve(const std::string& p) const;
    /// Creates every directory of the layout.
    void ensure() const;

    /// An explicit root wins; otherwise $CLT_FORGE_WORKSPACE, otherwise ./workspace.
    static Workspace locate(const std::optional<std::filesystem::path>& explicit_root = std::nullopt);
};

}  // namespace cltforge
