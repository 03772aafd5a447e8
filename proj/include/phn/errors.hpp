#pragma once

#include <stdexcept>
#include <string>

namespace phn {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not line up (message names both shapes).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value (layer counts, slopes, modes, fractions...).
struct ConfigError : Error {
    using Error::Error;
};

// Problems with input files or records; carries file/line context in the message.
struct DataError : Error {
    using Error::Error;
};

// An API precondition was violated (empty batch, vocab mismatch, non-scalar loss...).
struct ContractError : Error {
    using Error::Error;
};

// Non-finite values or other numeric breakdowns (training divergence included).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace phn
