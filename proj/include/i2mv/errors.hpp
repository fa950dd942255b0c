#pragma once

#include <stdexcept>
#include <string>

namespace i2mv {

// Bad configuration or CLI usage. Mapped to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent data files, split violations. Mapped to exit code 3.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Incompatible tensor dimensions at op level.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace i2mv
