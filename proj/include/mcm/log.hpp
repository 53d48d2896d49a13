#pragma once

#include <string_view>

#include "mcm/config.hpp"

MCM_BEGIN_NAMESPACE

enum class LogLevel { kQuiet, kWarn, kInfo };

void set_log_level(LogLevel level);
LogLevel log_level();

// Both write one line to stderr when the level allows it.
void log_warn(std::string_view message);
void log_info(std::string_view message);

MCM_END_NAMESPACE
