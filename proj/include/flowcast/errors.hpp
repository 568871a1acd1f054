#pragma once

#include <stdexcept>
#include <string>

namespace flowcast {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor dimension / shape mismatches. Messages name the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid configuration or API misuse (bad flag values, out-of-range
/// hyperparameters, calling an operation before its precondition holds).
struct ConfigError : Error {
    using Error::Error;
};

/// Problems with input data: CSV parse failures, duplicate timestamps,
/// impossible imputation, constant series under normalization, corrupt
/// checkpoint files.
struct DataError : Error {
    using Error::Error;
};

/// Failures arising during a training run, e.g. a diverged loss.
struct TrainingError : Error {
    using Error::Error;
};

} // namespace flowcast
