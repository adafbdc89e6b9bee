#pragma once

#include <stdexcept>
#include <string>

namespace amr {

/// Base exception for every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a robust estimator cannot produce a transform.
class EstimationError : public Error {
public:
    using Error::Error;
};

/// Raised by the differentiable core when a value becomes NaN/Inf.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Raised when a file cannot be read, parsed, or written.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace amr
