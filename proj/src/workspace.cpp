// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/workspace.hpp"

#include <cstdlib>

namespace cltforge {

std::filesystem::path Workspace::resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : root / path;
}

void Workspace::ensure() const {
    for (const auto& d : {cache(), checkpoints(), features(), graphs(), jobs(), metrics()})
        std::filesystem::create_directories(d);
}

Workspace Workspace::locate(const std::optional<std::filesystem::path>& explicit_root) {
    if (explicit_root) return {*explicit_root};
    if (const char* env = std::getenv(workspace_env); env && *env) return {env};
    return {"workspace"};
}

}  // namespace cltforge
