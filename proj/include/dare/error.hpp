#pragma once

#include <stdexcept>
#include <string>

namespace dare {

/// Malformed input: bad files, bad arguments, violated preconditions.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical breakdown during estimation (degenerate geometry, empty index...).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated by the caller.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace dare
