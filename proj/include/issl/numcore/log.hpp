// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <string>

namespace issl::log {

enum class Level { kDebug = 0, kInfo = 1, kWarn = 2, kSilent = 3 };

void set_level(Level level);
Level level();
void write(Level level, const std::string& msg);

template <typename... Args>
void info(const Args&... args) {
  if (level() > Level::kInfo) return;
  std::ostringstream os;
  (os << ... << args);
  write(Level::kInfo, os.str());
}

template <typename... Args>
void warn(const Args&... args) {
  if (level() > Level::kWarn) return;
  std::ostringstream os;
  (os << ... << args);
  write(Level::kWarn, os.str());
}

template <typename... Args>
void debug(const Args&... args) {
  if (level() > Level::kDebug) return;
  std::ostringstream os;
  (os << ... << args);
  write(Level::kDebug, os.str());
}

}  // namespace issl::log
