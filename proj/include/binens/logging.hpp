#pragma once

#include <cstdlib>
#include <iostream>
#include <string>

namespace binens {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Controlled by BINENS_LOG={error|info|debug}; defaults to info.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("BINENS_LOG");
        if (!env) return LogLevel::info;
        const std::string s(env);
        if (s == "error") return LogLevel::error;
        if (s == "debug") return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

inline void log(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    const char* tag = level == LogLevel::error ? "error" : level == LogLevel::debug ? "debug" : "info";
    std::cerr << "[binens:" << tag << "] " << msg << "\n";
}

inline void log_error(const std::string& msg) { log(LogLevel::error, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log(LogLevel::debug, msg); }

}  // namespace binens
