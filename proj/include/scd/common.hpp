#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace scd {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// map failures to exit codes (config -> 2, runtime -> 1).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/contract violations between tensors or between tensors and configs.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf escaped an op, or an op was fed non-finite input it cannot accept.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Bad run configuration (unknown keys, invalid values, inconsistent dims).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File format / filesystem problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

using index_t = std::int64_t;

}  // namespace scd
