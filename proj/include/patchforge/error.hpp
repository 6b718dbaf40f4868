#pragma once

#include <stdexcept>
#include <string>

namespace patchforge {

// Base for every error the toolkit raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor or image shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf where a finite value is required, or a diverged optimization.
class NumericError : public Error {
public:
    using Error::Error;
};

// Bad user configuration (CLI flags, JSON config, invalid supports).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed or corrupted file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

}  // namespace patchforge
