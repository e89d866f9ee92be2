#pragma once

#include <stdexcept>
#include <string>

namespace sonoseg {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad inputs the caller could have checked: invalid parameters, ranges,
// incompatible configs. The CLI maps these to exit code 1.
struct ValidationError : Error {
    using Error::Error;
};

// Tensor/shape disagreements; message names the offending dims.
struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

// Label map handed to an operation expecting a different schema.
struct SchemaError : ValidationError {
    using ValidationError::ValidationError;
};

// API misuse: backward on a non-scalar, attaching a second head, etc.
struct UsageError : ValidationError {
    using ValidationError::ValidationError;
};

// File format problems: bad magic, truncation, unreadable paths.
struct IoError : Error {
    using Error::Error;
};

// NaN/Inf encountered at an op boundary in checked mode.
struct NumericError : Error {
    using Error::Error;
};

} // namespace sonoseg
