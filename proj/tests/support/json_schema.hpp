// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Draft-07 validator for the keyword subset used by docs/schemas: type, enum,
// const, properties, required, additionalProperties, items, minItems,
// minLength, pattern, minimum, maximum, exclusiveMinimum and local $ref.
// Unknown keywords are an error so a schema cannot silently outgrow it.

#pragma once

#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace cltforge::test_support {

class JsonSchema {
public:
    explicit JsonSchema(nlohmann::json schema) : root_(std::move(schema)) {}

    static JsonSchema load(const std::filesystem::path& p) {
        std::ifstream in(p);
        if (!in) throw std::runtime_error("cannot read schema " + p.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return JsonSchema(nlohmann::json::parse(ss.str()));
    }

    /// Empty when valid; otherwise one message per violation.
    std::vector<std::string> errors(const nlohmann::json& doc) const {
        std::vector<std::string> out;
        check(root_, doc, "$", out);
        return out;
    }
    bool valid(const nlohmann::json& doc) const { return errors(doc).empty(); }

private:
    static bool has_type(const nlohmann::json& v, const std::string& t) {
        if (t == "object") return v.is_object();
        if (t == "array") return v.is_array();
        if (t == "string") return v.is_string();
        if (t == "boolean") return v.is_boolean();
        if (t == "null") return v.is_null();
        if (t == "integer") return v.is_number_integer();
        if (t == "number") return v.is_number();
        throw std::runtime_error("unknown schema type " + t);
    }

    const nlohmann::json& deref(const nlohmann::json& s) const {
        if (!s.contains("$ref")) return s;
        const std::string ref = s.at("$ref");
        const std::string prefix = "#/definitions/";
        if (ref.rfind(prefix, 0) != 0) throw std::runtime_error("unsupported $ref " + ref);
        return root_.at("definitions").at(ref.substr(prefix.size()));
    }

    void check(const nlohmann::json& schema, const nlohmann::json& v, const std::string& path,
               std::vector<std::string>& out) const {
        static const std::set<std::string> known = {
            "$schema", "$id", "title", "description", "definitions", "$ref", "type", "enum", "const",
            "properties", "required", "additionalProperties", "items", "minItems", "minLength", "pattern",
            "minimum", "maximum", "exclusiveMinimum"};
        for (const auto& [k, _] : schema.items())
            if (!known.count(k)) throw std::runtime_error("unsupported schema keyword " + k);
        const nlohmann::json& s = deref(schema);
        if (&s != &schema) return check(s, v, path, out);

        if (s.contains("type")) {
            bool ok = false;
            if (s["type"].is_array()) {
                for (const auto& t : s["type"]) ok = ok || has_type(v, t.get<std::string>());
            } else {
                ok = has_type(v, s["type"].get<std::string>());
            }
            if (!ok) return out.push_back(path + ": expected type " + s["type"].dump() + ", got " + v.dump());
        }
        if (s.contains("const") && v != s["const"]) out.push_back(path + ": expected " + s["const"].dump());
        if (s.contains("enum")) {
            bool found = false;
            for (const auto& e : s["enum"]) found = found || e == v;
            if (!found) out.push_back(path + ": " + v.dump() + " not in " + s["enum"].dump());
        }
        if (v.is_number()) {
            const double x = v.get<double>();
            if (s.contains("minimum") && x < s["minimum"].get<double>())
                out.push_back(path + ": " + v.dump() + " below minimum");
            if (s.contains("maximum") && x > s["maximum"].get<double>())
                out.push_back(path + ": " + v.dump() + " above maximum");
            if (s.contains("exclusiveMinimum") && !(x > s["exclusiveMinimum"].get<double>()))
                out.push_back(path + ": " + v.dump() + " not above exclusiveMinimum");
        }
        if (v.is_string()) {
            const std::string& str = v.get_ref<const std::string&>();
            if (s.contains("minLength") && str.size() < s["minLength"].get<std::size_t>())
                out.push_back(path + ": string shorter than minLength");
            if (s.contains("pattern") && !std::regex_search(str, std::regex(s["pattern"].get<std::string>())))
                out.push_back(path + ": '" + str + "' does not match " + s["pattern"].get<std::string>());
        }
        if (v.is_array()) {
            if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>())
                out.push_back(path + ": fewer than minItems");
            if (s.contains("items"))
                for (std::size_t i = 0; i < v.size(); ++i)
                    check(s["items"], v[i], path + "[" + std::to_string(i) + "]", out);
        }
        if (v.is_object()) {
            if (s.contains("required"))
                for (const auto& r : s["required"])
                    if (!v.contains(r.get<std::string>())) out.push_back(path + ": missing " + r.get<std::string>());
            const nlohmann::json props = s.value("properties", nlohmann::json::object());
            for (const auto& [k, x] : v.items()) {
                if (props.contains(k)) {
                    check(props[k], x, path + "." + k, out);
                } else if (s.contains("additionalProperties")) {
                    const auto& ap = s["additionalProperties"];
                    if (ap.is_boolean()) {
                        if (!ap.get<bool>()) out.push_back(path + ": unexpected property " + k);
                    } else {
                        check(ap, x, path + "." + k, out);
                    }
                }
            }
        }
    }

    nlohmann::json root_;
};

}  // namespace cltforge::test_support
