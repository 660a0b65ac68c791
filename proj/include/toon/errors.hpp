#pragma once

#include <stdexcept>
#include <string>

namespace toon {

/// Invalid argument value (range, size, count).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Caller broke a shape or usage contract.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Malformed or incomplete configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// NaN/Inf during training or sampling (CLI exit code 3).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Checkpoint or dataset file could not be read.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace toon
