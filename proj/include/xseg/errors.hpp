#pragma once

#include <stdexcept>
#include <string>

namespace xseg {

/// Tensor shapes that do not fit together.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration values (network, training, data generation).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An operation was called in the wrong state (e.g. backward without forward).
class StateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing or unreadable files.
class FileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Files that exist but have the wrong content format.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Aggregation over an empty record set.
class EmptySetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a NaN or infinite loss.
class NonFiniteLossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace xseg
