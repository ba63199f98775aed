#pragma once

#include <stdexcept>
#include <string>

namespace triqdef {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes handed to an op.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Bad argument or violated precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Missing or malformed file / dataset / container.
class DataError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered during training or evaluation.
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace triqdef
