#pragma once

#include <stdexcept>
#include <string>

namespace ensdown {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or array dimensions that do not fit together.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity appeared where finite values are required.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Malformed, truncated or corrupt file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A stored artifact was produced for a different configuration.
class ConfigMismatchError : public Error {
public:
    using Error::Error;
};

/// Invalid argument value (ranges, empty selections, bad configs).
class ValueError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace ensdown
