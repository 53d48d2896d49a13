#include "mcm/log.hpp"

#include <atomic>
#include <iostream>

MCM_BEGIN_NAMESPACE

namespace {
std::atomic<LogLevel> g_level{LogLevel::kWarn};
}

void set_log_level(LogLevel level) { g_level.store(level); }
LogLevel log_level() { return g_level.load(); }

void log_warn(std::string_view message) {
  if (g_level.load() >= LogLevel::kWarn) std::cerr << "warning: " << message << '\n';
}

void log_info(std::string_view message) {
  if (g_level.load() >= LogLevel::kInfo) std::cerr << message << '\n';
}

MCM_END_NAMESPACE
