#pragma once

#include <stdexcept>
#include <string>

namespace capiqa {

// Error hierarchy. The CLI maps each family onto a stable exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

/// Raised when a correlation is undefined (zero variance, fully tied ranks).
class UndefinedCorrelation : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace capiqa
