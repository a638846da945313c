#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "prunelab/common.hpp"

// Strict JSON access: every consumer of structured config rejects unknown
// keys and reports the offending field by name.
namespace prunelab::jsonutil {

using nlohmann::json;

inline void require_object(const json& j, const std::string& ctx) {
    if (!j.is_object()) {
        throw ConfigError(ctx + ": expected a JSON object, got " + std::string(j.type_name()));
    }
}

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& ctx) {
    require_object(j, ctx);
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed) {
            if (item.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError(ctx + ": unknown key \"" + item.key() + "\"");
        }
    }
}

template <typename T>
T require_field(const json& j, const char* key, const std::string& ctx) {
    require_object(j, ctx);
    auto it = j.find(key);
    if (it == j.end()) {
        throw ConfigError(ctx + ": missing required key \"" + key + "\"");
    }
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(ctx + ": key \"" + key + "\" has the wrong type (" + e.what() + ")");
    }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback, const std::string& ctx) {
    require_object(j, ctx);
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(ctx + ": key \"" + key + "\" has the wrong type (" + e.what() + ")");
    }
}

} // namespace prunelab::jsonutil
