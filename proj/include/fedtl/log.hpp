#pragma once

#include <string_view>

namespace fedtl::log {

enum class Level { error = 0, info = 1, debug = 2 };

/// Level from FTL_LOG_LEVEL (error | info | debug), default info. Unknown
/// values fall back to info.
Level level_from_env();
void set_level(Level level);

void error(std::string_view message);
void info(std::string_view message);
void debug(std::string_view message);

}  // namespace fedtl::log
