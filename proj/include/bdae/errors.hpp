#pragma once

#include <stdexcept>
#include <string>

namespace bdae {

// Error taxonomy mirrors the CLI exit-code contract:
// config/usage -> 2, I/O -> 3, numerical failure -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Shape or value violations of an operation's preconditions.
struct ValueError : Error {
    using Error::Error;
};

// Non-finite gradients, diverging runs.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace bdae
