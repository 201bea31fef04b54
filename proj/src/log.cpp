#include "semnerf/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

#include "semnerf/errors.hpp"

namespace semnerf {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInput: return "input_error";
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kData: return "data_error";
    case ErrorKind::kNumeric: return "numeric_error";
    case ErrorKind::kIo: return "io_error";
    case ErrorKind::kRequest: return "request_error";
    case ErrorKind::kInvariant: return "invariant_error";
  }
  return "error";
}

namespace log {
namespace {

Level initial_level() {
  const char* env = std::getenv("SEMNERF_LOG");
  if (env == nullptr) return Level::kWarn;
  const std::string v(env);
  if (v == "debug") return Level::kDebug;
  if (v == "info") return Level::kInfo;
  if (v == "error") return Level::kError;
  if (v == "off") return Level::kOff;
  return Level::kWarn;
}

std::atomic<Level>& current() {
  static std::atomic<Level> level{initial_level()};
  return level;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

constexpr std::string_view kNames[] = {"debug", "info", "warn", "error"};

}  // namespace

void set_level(Level level) { current().store(level); }
Level level() { return current().load(); }

void write(Level level, std::string_view message) {
  if (level < current().load() || level == Level::kOff) return;
  std::lock_guard lock(sink_mutex());
  std::clog << "[semnerf " << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace log
}  // namespace semnerf
