// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "cltforge/config.hpp"
#include "cltforge/error.hpp"
#include "cltforge/numeric.hpp"
#include "cltforge/workspace.hpp"

using namespace cltforge;
namespace fs = std::filesystem;

namespace {

const fs::path configs_dir = fs::path(CLTFORGE_SOURCE_DIR) / "configs";

std::string config_error(std::string_view text) {
    try {
        parse_config_text(text, "t.cfg");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
    EXPECT_EQ(parse_config_text(""), RunConfig{});
    EXPECT_EQ(parse_config_text("# only a comment\n\n   \n"), RunConfig{});
}

TEST(Config, ReferenceGpt2File) {
    const RunConfig c = parse_config(configs_dir / "gpt2_appendix.cfg");
    EXPECT_EQ(c.l0_coefficient, 2.0);
    EXPECT_EQ(c.dead_feature_window, 250);
    EXPECT_EQ(c.model_name, "gpt2");
    EXPECT_EQ(c.d_in, 768);
    EXPECT_EQ(c.expansion_factor, 32);
    EXPECT_EQ(c.context_size, 16);
    EXPECT_EQ(c.n_train_batch_per_buffer, 64);
    EXPECT_EQ(c.jumprelu_init_threshold, 0.03);
    EXPECT_EQ(c.jumprelu_bandwidth, 1.0);
    EXPECT_EQ(c.dead_penalty_coef, 1e-5);
    EXPECT_EQ(c.lr, 4e-4);
    EXPECT_EQ(c.total_training_steps(), 200'000u);
    EXPECT_EQ(c.lr_decay_steps, 10'000);
    EXPECT_EQ(c.l0_warm_up_steps, 140'000);
    EXPECT_EQ(c.checkpoint_l0, (std::vector<double>{10, 5}));
    ASSERT_TRUE(c.optimal_l0);
    EXPECT_EQ(*c.optimal_l0, 5.0);
    EXPECT_FALSE(c.from_pretrained_path);
    EXPECT_FALSE(c.run_name);
    EXPECT_TRUE(c.log_to_wandb);
}

TEST(Config, ReferenceAutointerpDict) {
    const RunConfig c = parse_config(configs_dir / "gpt2_autointerp.cfg");
    EXPECT_EQ(c.total_autointerp_tokens, 10'000'000);
    EXPECT_EQ(c.train_batch_size_tokens, 8192);
    EXPECT_EQ(c.clt_path, "/clt/checkpoint/path");
    EXPECT_EQ(c.latent_cache_path, "/where/to/save/autointerp");
}

TEST(Config, CommittedConfigsParseAndRoundTrip) {
    int n = 0;
    for (const auto& e : fs::directory_iterator(configs_dir)) {
        if (e.path().extension() != ".cfg") continue;
        SCOPED_TRACE(e.path().string());
        const RunConfig c = parse_config(e.path());
        EXPECT_NO_THROW(c.validate());
        EXPECT_EQ(parse_config_text(serialize_config(c)), c);
        ++n;
    }
    EXPECT_GE(n, 4);
}

TEST(Config, MisspelledKeyIsNamed) {
    const std::string msg = config_error("seed = 1\nl0_coeficient = 2.0\n");
    EXPECT_NE(msg.find("l0_coeficient"), std::string::npos) << msg;
    EXPECT_NE(msg.find("t.cfg:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("did you mean 'l0_coefficient'"), std::string::npos) << msg;
    const std::string far = config_error("completely_unrelated = 1\n");
    EXPECT_NE(far.find("completely_unrelated"), std::string::npos);
    EXPECT_EQ(far.find("did you mean"), std::string::npos) << far;
}

TEST(Config, TypeMismatchHasLineNumber) {
    EXPECT_NE(config_error("\n\nd_in = \"wide\"\n").find("t.cfg:3"), std::string::npos);
    EXPECT_NE(config_error("seed = 1.5\n").find("t.cfg:1"), std::string::npos);
    EXPECT_NE(config_error("log_to_wandb = 1\n").find("log_to_wandb"), std::string::npos);
    EXPECT_NE(config_error("checkpoint_l0 = 5\n").find("checkpoint_l0"), std::string::npos);
    EXPECT_NE(config_error("lr = [1, 2]\n").find("lr"), std::string::npos);
    EXPECT_NE(config_error("prompt = \"unterminated\n").find("t.cfg:1"), std::string::npos);
    EXPECT_NE(config_error("seed 42\n").find("t.cfg:1"), std::string::npos);
}

TEST(Config, DuplicateKeyRejected) {
    const std::string msg = config_error("seed = 1\nlr = 1e-3\nseed = 2\n");
    EXPECT_NE(msg.find("t.cfg:3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(Config, RangesValidatedWithLine) {
    EXPECT_NE(config_error("seed = 1\nadam_beta1 = 1.0\n").find("t.cfg:2"), std::string::npos);
    EXPECT_NE(config_error("adam_beta2 = 0\n").find("adam_beta2"), std::string::npos);
    EXPECT_NE(config_error("d_in = 0\n").find("d_in"), std::string::npos);
    EXPECT_NE(config_error("lr = -1e-4\n").find("lr"), std::string::npos);
    EXPECT_NE(config_error("node_mass = 1.5\n").find("node_mass"), std::string::npos);
    EXPECT_NE(config_error("quant_mode = \"int3\"\n").find("quant_mode"), std::string::npos);
    EXPECT_NE(config_error("distributed_setup = \"fsdp2\"\n").find("distributed_setup"), std::string::npos);
    EXPECT_NE(config_error("checkpoint_l0 = [10, -1]\n").find("checkpoint_l0"), std::string::npos);
}

TEST(Config, PythonLiteralForms) {
    const RunConfig c = parse_config_text(
        "total_training_tokens = 8_192_000   # comment\n"
        "from_pretrained_path = None,\n"
        "run_name = null\n"
        "log_to_wandb = False\n"
        "checkpoint_l0 = [40, 20.5, 1e1,]\n"
        "wandb_project = \"a # not a comment\"\n"
        "optimal_l0 = 3\n"
        "lr = 1E-3\n");
    EXPECT_EQ(c.total_training_tokens, 8'192'000);
    EXPECT_FALSE(c.from_pretrained_path);
    EXPECT_FALSE(c.run_name);
    EXPECT_FALSE(c.log_to_wandb);
    EXPECT_EQ(c.checkpoint_l0, (std::vector<double>{40, 20.5, 10}));
    EXPECT_EQ(c.wandb_project, "a # not a comment");
    EXPECT_EQ(c.optimal_l0, 3.0);
    EXPECT_EQ(c.lr, 1e-3);
}

TEST(Config, SerializeIsFixedPoint) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        RunConfig c;
        c.seed = static_cast<std::int64_t>(rng.below(1'000'000));
        c.lr = std::ldexp(rng.uniform() + 0.01, -static_cast<int>(rng.below(20)));
        c.l0_coefficient = rng.uniform() * 3;
        c.adam_beta2 = 0.5 + rng.uniform() * 0.49;
        c.checkpoint_l0.assign(rng.below(4), 0.0);
        for (auto& v : c.checkpoint_l0) v = 1 + rng.uniform() * 100;
        if (rng.below(2)) c.optimal_l0 = 0.5 + rng.uniform();
        if (rng.below(2)) c.run_name = "run \"" + std::to_string(trial) + "\" \\ # x";
        c.log_to_wandb = rng.below(2) == 1;
        c.prompt = trial % 3 ? "tick 'quote'" : "";
        const std::string text = serialize_config(c);
        const RunConfig back = parse_config_text(text);
        ASSERT_EQ(back, c) << text;
        EXPECT_EQ(serialize_config(back), text);
    }
}

TEST(Config, SetValueFromCommandLine) {
    RunConfig c;
    set_config_value(c, "lr", "1e-3");
    set_config_value(c, "checkpoint_l0", "[5, 2]");
    set_config_value(c, "run_name", "nightly");
    set_config_value(c, "optimal_l0", "None");
    EXPECT_EQ(c.lr, 1e-3);
    EXPECT_EQ(c.checkpoint_l0, (std::vector<double>{5, 2}));
    EXPECT_EQ(c.run_name, "nightly");
    EXPECT_FALSE(c.optimal_l0);
    const RunConfig before = c;
    EXPECT_THROW(set_config_value(c, "adam_beta1", "2"), ConfigError);
    EXPECT_THROW(set_config_value(c, "no_such_key", "2"), ConfigError);
    EXPECT_THROW(set_config_value(c, "d_in", "abc"), ConfigError);
    EXPECT_EQ(c, before);
}

TEST(Config, KeysCoverReferenceNames) {
    const auto keys = config_keys();
    for (const char* k :
         {"distributed_setup", "device", "dtype", "seed", "n_checkpoints", "checkpoint_path", "from_pretrained_path",
          "model_name", "dataset_path", "context_size", "d_in", "expansion_factor", "cached_activations_path",
          "jumprelu_init_threshold", "jumprelu_bandwidth", "train_batch_size_tokens", "gradient_accumulation_steps",
          "n_train_batch_per_buffer", "total_training_tokens", "lr", "lr_warm_up_steps", "lr_decay_steps",
          "adam_beta1", "adam_beta2", "l0_coefficient", "l0_warm_up_steps", "dead_penalty_coef",
          "dead_feature_window", "checkpoint_l0", "optimal_l0", "log_to_wandb", "wandb_project", "wandb_id",
          "wandb_log_frequency", "eval_every_n_wandb_logs", "run_name", "clt_path", "latent_cache_path",
          "total_autointerp_tokens"})
        EXPECT_NE(std::find(keys.begin(), keys.end(), k), keys.end()) << k;
}

TEST(Workspace, LocatePrecedence) {
    const fs::path tmp = fs::temp_directory_path() / "cltforge_ws_test";
    ::setenv(workspace_env, (tmp / "env").c_str(), 1);
    EXPECT_EQ(Workspace::locate(std::nullopt).root, tmp / "env");
    EXPECT_EQ(Workspace::locate(tmp / "flag").root, tmp / "flag");
    ::unsetenv(workspace_env);
    EXPECT_EQ(Workspace::locate(std::nullopt).root, fs::path("workspace"));

    fs::remove_all(tmp);
    const Workspace ws{tmp / "w"};
    ws.ensure();
    for (const auto& d : {ws.cache(), ws.checkpoints(), ws.features(), ws.graphs(), ws.jobs(), ws.metrics()})
        EXPECT_TRUE(fs::is_directory(d)) << d;
    EXPECT_EQ(ws.resolve("cache"), ws.root / "cache");
    EXPECT_EQ(ws.resolve("/abs/x"), fs::path("/abs/x"));
    fs::remove_all(tmp);
}
