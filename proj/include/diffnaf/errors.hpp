#pragma once

#include <stdexcept>
#include <string>

namespace diffnaf {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: geometry constraints, out-of-range indices, malformed
// arguments. The message names the violated constraint.
struct InvalidArgumentError : Error {
    explicit InvalidArgumentError(const std::string& msg) : Error(msg) {}
};

// Shapes or geometries of two inputs do not agree.
struct MismatchError : Error {
    explicit MismatchError(const std::string& msg) : Error(msg) {}
};

// File format problems: bad magic, version, truncation, NaN payloads.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// An optimization produced a non-finite loss.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

}  // namespace diffnaf
