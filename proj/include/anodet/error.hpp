#pragma once

#include <stdexcept>
#include <string>

namespace anodet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-domain argument (empty raster, fraction outside [0,1], ...).
class InvalidInputError : public Error {
public:
    using Error::Error;
};

/// Tensor or raster dimensions do not agree with what an operation needs.
class ShapeError : public Error {
public:
    using Error::Error;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Non-finite value detected in a loss or score.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Evaluation input that contains a single class only.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Unreadable, malformed or incompatible file on disk.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace anodet
