// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cltforge/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include <json.hpp>

#include "cltforge/activation_cache.hpp"
#include "cltforge/codec.hpp"
#include "cltforge/error.hpp"

namespace cltforge {

namespace {

using Member = std::variant<bool RunConfig::*, std::int64_t RunConfig::*, double RunConfig::*, std::string RunConfig::*,
                            std::optional<std::string> RunConfig::*, std::optional<double> RunConfig::*,
                            std::vector<double> RunConfig::*>;

struct Field {
    const char* name;
    Member member;
};

#define F(name) Field{#name, &RunConfig::name}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        F(distributed_setup), F(device), F(dtype), F(seed),
        F(n_checkpoints), F(checkpoint_path), F(from_pretrained_path),
        F(model_name), F(dataset_path), F(context_size), F(d_in), F(expansion_factor), F(cached_activations_path),
        F(jumprelu_init_threshold), F(jumprelu_bandwidth),
        F(train_batch_size_tokens), F(gradient_accumulation_steps), F(n_train_batch_per_buffer),
        F(total_training_tokens),
        F(lr), F(lr_warm_up_steps), F(lr_decay_steps), F(adam_beta1), F(adam_beta2),
        F(l0_coefficient), F(l0_warm_up_steps), F(dead_penalty_coef), F(dead_feature_window),
        F(checkpoint_l0), F(optimal_l0),
        F(log_to_wandb), F(wandb_project), F(wandb_id), F(wandb_log_frequency), F(eval_every_n_wandb_logs), F(run_name),
        F(clt_path), F(latent_cache_path), F(total_autointerp_tokens), F(autointerp_top_k),
        F(autointerp_window_before), F(autointerp_window_after), F(explainer_url),
        F(n_layers), F(d_mlp), F(vocab_size), F(corpus_sequences), F(host_train_steps), F(host_train_sequences),
        F(quant_mode), F(codec), F(codec_level), F(tokens_per_chunk), F(norm_batches), F(norm_batch_tokens),
        F(prompt), F(node_mass), F(edge_mass), F(max_logits), F(jacobian_path),
        F(finetune_rank), F(finetune_steps), F(finetune_lr),
        F(num_workers), F(serve_host), F(serve_port), F(static_dir),
    };
    return f;
}

#undef F

const Field* find_field(std::string_view key) {
    for (const auto& f : fields())
        if (key == f.name) return &f;
    return nullptr;
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1])});
            diag = up;
        }
    }
    return row[b.size()];
}

std::string unknown_key_message(const std::string& key) {
    std::string best;
    std::size_t best_d = 4;
    for (const auto& f : fields()) {
        const std::size_t d = edit_distance(key, f.name);
        if (d < best_d) best_d = d, best = f.name;
    }
    std::string msg = "unknown key '" + key + "'";
    if (!best.empty()) msg += " (did you mean '" + best + "'?)";
    return msg;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

// Drops a `#` comment that is not inside a quoted string.
std::string_view strip_comment(std::string_view s) {
    char quote = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (quote) {
            if (c == '\\') ++i;
            else if (c == quote) quote = 0;
        } else if (c == '"' || c == '\'') {
            quote = c;
        } else if (c == '#') {
            return s.substr(0, i);
        }
    }
    return s;
}

// 1_000 → 1000; underscores only between digits.
std::optional<std::string> strip_digit_separators(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '_') {
            if (i == 0 || i + 1 == s.size() || !std::isdigit(static_cast<unsigned char>(s[i - 1])) ||
                !std::isdigit(static_cast<unsigned char>(s[i + 1])))
                return std::nullopt;
            continue;
        }
        out.push_back(s[i]);
    }
    return out;
}

bool is_none(std::string_view v) { return v == "None" || v == "null"; }

std::optional<std::int64_t> parse_int(std::string_view v) {
    const auto s = strip_digit_separators(v);
    if (!s || s->empty()) return std::nullopt;
    const char* b = s->data();
    const char* e = b + s->size();
    if (*b == '+') ++b;
    std::int64_t out = 0;
    const auto r = std::from_chars(b, e, out);
    if (r.ec != std::errc() || r.ptr != e) return std::nullopt;
    return out;
}

std::optional<double> parse_double(std::string_view v) {
    const auto s = strip_digit_separators(v);
    if (!s || s->empty()) return std::nullopt;
    char* end = nullptr;
    const double d = std::strtod(s->c_str(), &end);
    if (end != s->c_str() + s->size() || !std::isfinite(d)) return std::nullopt;
    return d;
}

std::optional<std::string> parse_string(std::string_view v) {
    if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) {
        std::string out;
        for (std::size_t i = 1; i + 1 < v.size(); ++i) {
            if (v[i] == '\\' && i + 2 < v.size()) {
                const char n = v[++i];
                out.push_back(n == 'n' ? '\n' : n == 't' ? '\t' : n);
            } else if (v[i] == v.front()) {
                return std::nullopt;
            } else {
                out.push_back(v[i]);
            }
        }
        return out;
    }
    if (v.empty() || v.front() == '"' || v.front() == '\'' || v.front() == '[' || is_none(v)) return std::nullopt;
    return std::string(v);
}

std::optional<std::vector<double>> parse_list(std::string_view v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') return std::nullopt;
    auto s = strip_digit_separators(v);
    if (!s) return std::nullopt;
    s->pop_back();
    while (!s->empty() && std::isspace(static_cast<unsigned char>(s->back()))) s->pop_back();
    if (s->size() > 1 && s->back() == ',') s->pop_back();
    s->push_back(']');
    const auto j = nlohmann::json::parse(*s, nullptr, false);
    if (j.is_discarded() || !j.is_array()) return std::nullopt;
    std::vector<double> out;
    for (const auto& x : j) {
        if (!x.is_number()) return std::nullopt;
        out.push_back(x.get<double>());
    }
    return out;
}

const char* type_name(const Member& m) {
    switch (m.index()) {
        case 0: return "a boolean (True or False)";
        case 1: return "an integer";
        case 2: return "a number";
        case 3: return "a string";
        case 4: return "a string or None";
        case 5: return "a number or None";
        default: return "a list of numbers";
    }
}

// False on a type mismatch.
bool assign(RunConfig& cfg, const Member& member, std::string_view v) {
    return std::visit(
        [&](auto ptr) -> bool {
            using T = std::remove_reference_t<decltype(cfg.*ptr)>;
            if constexpr (std::is_same_v<T, bool>) {
                if (v == "True" || v == "true") return cfg.*ptr = true, true;
                if (v == "False" || v == "false") return cfg.*ptr = false, true;
                return false;
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
                const auto x = parse_int(v);
                return x ? (cfg.*ptr = *x, true) : false;
            } else if constexpr (std::is_same_v<T, double>) {
                const auto x = parse_double(v);
                return x ? (cfg.*ptr = *x, true) : false;
            } else if constexpr (std::is_same_v<T, std::string>) {
                const auto x = parse_string(v);
                return x ? (cfg.*ptr = *x, true) : false;
            } else if constexpr (std::is_same_v<T, std::optional<std::string>>) {
                if (is_none(v)) return cfg.*ptr = std::nullopt, true;
                const auto x = parse_string(v);
                return x ? (cfg.*ptr = *x, true) : false;
            } else if constexpr (std::is_same_v<T, std::optional<double>>) {
                if (is_none(v)) return cfg.*ptr = std::nullopt, true;
                const auto x = parse_double(v);
                return x ? (cfg.*ptr = *x, true) : false;
            } else {
                const auto x = parse_list(v);
                return x ? (cfg.*ptr = *x, true) : false;
            }
        },
        member);
}

std::string format_double(double d) {
    char buf[64];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, d);
        if (std::strtod(buf, nullptr) == d) break;
    }
    std::string s = buf;
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out.push_back(c);
    }
    return out + "\"";
}

std::string format_value(const RunConfig& cfg, const Member& member) {
    return std::visit(
        [&](auto ptr) -> std::string {
            const auto& v = cfg.*ptr;
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, bool>) return v ? "True" : "False";
            else if constexpr (std::is_same_v<T, std::int64_t>) return std::to_string(v);
            else if constexpr (std::is_same_v<T, double>) return format_double(v);
            else if constexpr (std::is_same_v<T, std::string>) return quote(v);
            else if constexpr (std::is_same_v<T, std::optional<std::string>>) return v ? quote(*v) : "None";
            else if constexpr (std::is_same_v<T, std::optional<double>>) return v ? format_double(*v) : "None";
            else {
                std::string s = "[";
                for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
                return s + "]";
            }
        },
        member);
}

struct Violation {
    std::string key;
    std::string message;
};

std::optional<Violation> check(const RunConfig& c) {
    auto positive = [](std::int64_t v) { return v > 0; };
    const std::pair<const char*, std::int64_t> counts[] = {
        {"context_size", c.context_size}, {"d_in", c.d_in}, {"expansion_factor", c.expansion_factor},
        {"train_batch_size_tokens", c.train_batch_size_tokens},
        {"gradient_accumulation_steps", c.gradient_accumulation_steps},
        {"n_train_batch_per_buffer", c.n_train_batch_per_buffer}, {"total_training_tokens", c.total_training_tokens},
        {"dead_feature_window", c.dead_feature_window}, {"total_autointerp_tokens", c.total_autointerp_tokens},
        {"autointerp_top_k", c.autointerp_top_k}, {"n_layers", c.n_layers}, {"d_mlp", c.d_mlp},
        {"vocab_size", c.vocab_size}, {"corpus_sequences", c.corpus_sequences},
        {"host_train_sequences", c.host_train_sequences}, {"tokens_per_chunk", c.tokens_per_chunk},
        {"norm_batches", c.norm_batches}, {"norm_batch_tokens", c.norm_batch_tokens}, {"max_logits", c.max_logits},
        {"finetune_rank", c.finetune_rank}, {"finetune_steps", c.finetune_steps}, {"num_workers", c.num_workers},
        {"wandb_log_frequency", c.wandb_log_frequency}, {"eval_every_n_wandb_logs", c.eval_every_n_wandb_logs},
    };
    for (const auto& [k, v] : counts)
        if (!positive(v)) return Violation{k, "must be a positive integer, got " + std::to_string(v)};
    const std::pair<const char*, std::int64_t> non_negative[] = {
        {"seed", c.seed}, {"n_checkpoints", c.n_checkpoints}, {"lr_warm_up_steps", c.lr_warm_up_steps},
        {"lr_decay_steps", c.lr_decay_steps}, {"l0_warm_up_steps", c.l0_warm_up_steps},
        {"host_train_steps", c.host_train_steps}, {"autointerp_window_before", c.autointerp_window_before},
        {"autointerp_window_after", c.autointerp_window_after},
    };
    for (const auto& [k, v] : non_negative)
        if (v < 0) return Violation{k, "must be non-negative, got " + std::to_string(v)};
    if (c.train_batch_size_tokens * c.gradient_accumulation_steps > c.total_training_tokens)
        return Violation{"total_training_tokens",
                         "must cover at least one step of train_batch_size_tokens x gradient_accumulation_steps"};
    auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!open_unit(c.adam_beta1)) return Violation{"adam_beta1", "must be in (0, 1)"};
    if (!open_unit(c.adam_beta2)) return Violation{"adam_beta2", "must be in (0, 1)"};
    if (!(c.lr > 0)) return Violation{"lr", "must be positive"};
    if (!(c.finetune_lr > 0)) return Violation{"finetune_lr", "must be positive"};
    if (!(c.jumprelu_init_threshold > 0)) return Violation{"jumprelu_init_threshold", "must be positive"};
    if (!(c.jumprelu_bandwidth > 0)) return Violation{"jumprelu_bandwidth", "must be positive"};
    if (c.l0_coefficient < 0) return Violation{"l0_coefficient", "must be non-negative"};
    if (c.dead_penalty_coef < 0) return Violation{"dead_penalty_coef", "must be non-negative"};
    for (double v : c.checkpoint_l0)
        if (!(v > 0)) return Violation{"checkpoint_l0", "entries must be positive"};
    if (c.optimal_l0 && !(*c.optimal_l0 > 0)) return Violation{"optimal_l0", "must be positive"};
    if (!(c.node_mass > 0 && c.node_mass <= 1)) return Violation{"node_mass", "must be in (0, 1]"};
    if (!(c.edge_mass > 0 && c.edge_mass <= 1)) return Violation{"edge_mass", "must be in (0, 1]"};
    if (c.serve_port < 0 || c.serve_port > 65535) return Violation{"serve_port", "must be in [0, 65535]"};
    if (c.codec_level < 1 || c.codec_level > 19) return Violation{"codec_level", "must be in [1, 19]"};
    const std::string setups[] = {"feature_sharding", "ddp", "data_parallel"};
    if (std::find(std::begin(setups), std::end(setups), c.distributed_setup) == std::end(setups))
        return Violation{"distributed_setup", "must be feature_sharding, ddp or data_parallel"};
    if (c.dtype != "float32") return Violation{"dtype", "only float32 is supported"};
    if (c.jacobian_path != "direct" && c.jacobian_path != "through_mlps")
        return Violation{"jacobian_path", "must be direct or through_mlps"};
    try {
        parse_quant_mode(c.quant_mode);
    } catch (const Error& e) {
        return Violation{"quant_mode", e.what()};
    }
    try {
        parse_codec(c.codec);
    } catch (const Error& e) {
        return Violation{"codec", e.what()};
    }
    return std::nullopt;
}

}  // namespace

std::size_t RunConfig::total_training_steps() const {
    const std::int64_t per_step = train_batch_size_tokens * gradient_accumulation_steps;
    return per_step > 0 ? static_cast<std::size_t>(total_training_tokens / per_step) : 0;
}

void RunConfig::validate() const {
    if (const auto v = check(*this)) throw ConfigError(v->key + " " + v->message);
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.emplace_back(f.name);
    return out;
}

RunConfig parse_config_text(std::string_view text, const std::string& source) {
    RunConfig cfg;
    std::map<std::string, std::size_t> seen;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    auto fail = [&](std::size_t line, const std::string& msg) {
        throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
    };
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.back() == ',') line = trim(line.substr(0, line.size() - 1));
        std::string key;
        std::string_view value;
        if (line.front() == '"' || line.front() == '\'') {
            // dict entry: "key": value
            const auto close = line.find(line.front(), 1);
            const auto colon = close == std::string_view::npos ? close : line.find_first_not_of(" \t", close + 1);
            if (colon == std::string_view::npos || line[colon] != ':')
                fail(line_no, "expected '\"key\": value', got '" + std::string(line) + "'");
            key = std::string(line.substr(1, close - 1));
            value = trim(line.substr(colon + 1));
        } else {
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) fail(line_no, "expected 'key = value', got '" + std::string(line) + "'");
            key = std::string(trim(line.substr(0, eq)));
            value = trim(line.substr(eq + 1));
        }
        const Field* f = find_field(key);
        if (!f) fail(line_no, unknown_key_message(key));
        if (const auto it = seen.find(key); it != seen.end())
            fail(line_no, "duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
        seen.emplace(key, line_no);
        if (!assign(cfg, f->member, value))
            fail(line_no, "'" + key + "' expects " + type_name(f->member) + ", got '" + std::string(value) + "'");
    }
    if (const auto v = check(cfg)) {
        const auto it = seen.find(v->key);
        if (it != seen.end()) fail(it->second, v->key + " " + v->message);
        throw ConfigError(source + ": " + v->key + " " + v->message);
    }
    return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

void set_config_value(RunConfig& cfg, const std::string& key, std::string_view value) {
    const Field* f = find_field(key);
    if (!f) throw ConfigError(unknown_key_message(key));
    RunConfig next = cfg;
    if (!assign(next, f->member, trim(value)))
        throw ConfigError("'" + key + "' expects " + type_name(f->member) + ", got '" + std::string(value) + "'");
    next.validate();
    cfg = std::move(next);
}

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += std::string(f.name) + " = " + format_value(cfg, f.member) + "\n";
    return out;
}

}  // namespace cltforge
