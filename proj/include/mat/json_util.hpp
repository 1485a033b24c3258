#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"

#include "mat/errors.hpp"

namespace mat {

using Json = nlohmann::json;

/// Rejects keys outside `allowed`; silent typos in configs are not tolerated.
inline void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                               std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError(std::string(context) + ": unknown key '" + it.key() + "'");
    }
  }
}

/// Reads j[key] into out when present, converting type errors to ConfigError.
template <class V>
void read_opt(const Json& j, std::string_view key, V& out, std::string_view context) {
  auto it = j.find(std::string(key));
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string(context) + "." + std::string(key) + ": " + e.what());
  }
}

}  // namespace mat
