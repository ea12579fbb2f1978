#pragma once

#include <stdexcept>
#include <string>

namespace binens {

// Error taxonomy used across the library. The CLI maps these onto process
// exit codes (config/input -> 2, degenerate training -> 3, internal -> 4).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateTrainingError : std::runtime_error {
    explicit DegenerateTrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InternalError : std::runtime_error {
    explicit InternalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace binens
