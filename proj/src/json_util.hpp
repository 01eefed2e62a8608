// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Strict JSON field access for configuration documents.

#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mtlora/errors.hpp"

namespace mtlora::detail {

using Json = nlohmann::json;

inline void require_object(const Json& j, std::string_view where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
}

/// Rejects keys outside `allowed`.
inline void check_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                       std::string_view where) {
    require_object(j, where);
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (std::string_view a : allowed) known = known || it.key() == a;
        if (!known) throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
    }
}

/// Reads `key` into `out` if present, with a ConfigError on type mismatch.
template <typename T>
void read(const Json& j, std::string_view key, T& out, std::string_view where) {
    const auto it = j.find(std::string(key));
    if (it == j.end()) return;
    try {
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            const bool ok = it->is_number_unsigned() || (it->is_number_integer() && it->template get<long long>() >= 0);
            if (!ok) throw ConfigError("");
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) throw ConfigError("");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) throw ConfigError("");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) throw ConfigError("");
        }
        out = it->get<T>();
    } catch (const std::exception&) {
        throw ConfigError(std::string(where) + ": field '" + std::string(key) + "' has the wrong type");
    }
}

}  // namespace mtlora::detail
