#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "protnet/errors.hpp"

namespace protnet::detail {

/// Reads `key` if present; a value of the wrong type is a ConfigError
/// naming `where.key`.
template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where = "") {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError((where.empty() ? "" : where + ".") + key + ": wrong value type");
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

}  // namespace protnet::detail
