#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace polylab {

/// Invalid model or experiment configuration (bad kernel, wrap violation, ...).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, step out of range, ...).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf or a vanishing mass showed up while evolving a field.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::int64_t step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}

    std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace polylab
