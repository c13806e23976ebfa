#pragma once

#include <stdexcept>
#include <string>

namespace mixskd {

// Error taxonomy shared by all modules. Shape errors cover tensor-level
// mismatches, config errors cover invalid hyperparameters/geometry, format
// errors cover on-disk parsing, evaluation errors cover NaN-producing math.
struct InvalidShapeError : std::runtime_error {
    explicit InvalidShapeError(const std::string& msg) : std::runtime_error("invalid shape: " + msg) {}
};

struct InvalidConfigError : std::runtime_error {
    explicit InvalidConfigError(const std::string& msg) : std::runtime_error("invalid config: " + msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct EvaluationError : std::runtime_error {
    explicit EvaluationError(const std::string& msg) : std::runtime_error("evaluation error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace mixskd
