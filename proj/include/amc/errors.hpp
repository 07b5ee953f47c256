#pragma once

#include <stdexcept>
#include <string>

namespace amc {

// Base for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad inputs: shape mismatches, malformed files, unknown config keys,
// out-of-vocabulary words, unreachable graph nodes. CLI exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

// A reduction or region with nothing in it. Callers decide whether this
// is fatal or means "skip the sample".
class EmptyDomainError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Numeric failure: NaN where finite values are required, log of a
// non-positive value, zero-norm normalization. CLI exit code 2.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace amc
