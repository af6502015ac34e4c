#include "fedtl/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <memory>
#include <string>

namespace fedtl::log {
namespace {

spdlog::level::level_enum to_spdlog(Level level) {
  switch (level) {
    case Level::error: return spdlog::level::err;
    case Level::info: return spdlog::level::info;
    case Level::debug: return spdlog::level::debug;
  }
  return spdlog::level::info;
}

spdlog::logger& logger() {
  static const std::shared_ptr<spdlog::logger> instance = [] {
    auto l = std::make_shared<spdlog::logger>(
        "fedtl", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    l->set_pattern("[%H:%M:%S.%e] [%l] %v");
    l->set_level(to_spdlog(level_from_env()));
    return l;
  }();
  return *instance;
}

}  // namespace

Level level_from_env() {
  const char* raw = std::getenv("FTL_LOG_LEVEL");
  if (raw == nullptr) return Level::info;
  const std::string value(raw);
  if (value == "error") return Level::error;
  if (value == "debug") return Level::debug;
  return Level::info;
}

void set_level(Level level) { logger().set_level(to_spdlog(level)); }

void error(std::string_view message) { logger().error("{}", message); }
void info(std::string_view message) { logger().info("{}", message); }
void debug(std::string_view message) { logger().debug("{}", message); }

}  // namespace fedtl::log
