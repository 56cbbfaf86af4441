#pragma once

#include <stdexcept>
#include <string>

namespace bnn {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shape is empty, has a zero extent, or does not fit an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid layer, model or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data (datasets, checkpoints, packed models).
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace bnn
