#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nls {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Network or layer description that cannot be instantiated.
class InvalidSpec : public Error {
public:
    using Error::Error;
};

class NoContour : public Error {
public:
    using Error::Error;
};

/// Non-finite values produced while integrating or differentiating.
class NumericalBlowup : public Error {
public:
    using Error::Error;
};

class StabilityError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    explicit FormatError(const std::string& what) : Error(what) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_ = 0;
};

/// A sample that lost all of its foreground; callers resample.
class DegenerateSample : public Error {
public:
    using Error::Error;
};

class InvalidBatch : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace nls
