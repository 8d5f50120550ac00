// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/numcore/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace issl::log {

namespace {
std::atomic<Level> g_level{Level::kInfo};
std::mutex g_mu;
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level level, const std::string& msg) {
  static const char* const kTags[] = {"DEBUG", "INFO", "WARN", ""};
  std::lock_guard<std::mutex> lock(g_mu);
  std::cerr << kTags[static_cast<int>(level)] << " " << msg << '\n';
}

}  // namespace issl::log
