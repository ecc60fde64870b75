#pragma once
#include <stdexcept>
#include <string>

namespace vseg {

// Invalid caller input: bad shapes, bad values, bad arguments.
struct InputError : std::invalid_argument {
    explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// Shape incompatibility between tensors participating in an op.
struct ShapeError : InputError {
    explicit ShapeError(const std::string& what) : InputError(what) {}
};

// Broken API contract (e.g. backward on a consumed tape, non-scalar loss).
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

// Invalid configuration value.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or mismatched on-disk data (bad magic, truncation, version).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem-level failure; message carries the file name.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where the numerical contract forbids them (NaN loss,
// corrupted parameters). The message names the first offending quantity.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace vseg
