#pragma once

#include <cstdlib>
#include <string>
#include <string_view>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "mat/errors.hpp"

namespace mat {

/// Stderr logger; level from ANTICIPATE_LOG (error, info, debug), default info.
inline spdlog::logger& logger() {
  static auto instance = [] {
    auto l = spdlog::stderr_logger_st("anticipate");
    l->set_pattern("[%l] %v");
    const char* env = std::getenv("ANTICIPATE_LOG");
    const std::string_view level = env ? env : "info";
    if (level == "error") {
      l->set_level(spdlog::level::err);
    } else if (level == "debug") {
      l->set_level(spdlog::level::debug);
    } else {
      l->set_level(spdlog::level::info);
    }
    return l;
  }();
  return *instance;
}

/// Validates ANTICIPATE_LOG; unknown values are a configuration error.
inline void check_log_env() {
  const char* env = std::getenv("ANTICIPATE_LOG");
  if (!env) return;
  const std::string_view v(env);
  if (v != "error" && v != "info" && v != "debug") {
    throw ConfigError("ANTICIPATE_LOG must be error, info or debug, got '" + std::string(v) + "'");
  }
}

inline void log_error(const std::string& msg) { logger().error(msg); }
inline void log_warn(const std::string& msg) { logger().warn(msg); }
inline void log_info(const std::string& msg) { logger().info(msg); }
inline void log_debug(const std::string& msg) { logger().debug(msg); }

}  // namespace mat
