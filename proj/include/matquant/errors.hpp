#pragma once

#include <stdexcept>
#include <string>

namespace matquant {

// Base class for all toolkit errors so callers can catch one type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition / API misuse (bad bit-widths, mismatched configs, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Shape disagreement between tensors.
struct DimensionError : ContractError {
    explicit DimensionError(const std::string& msg) : ContractError(msg) {}
};

// NaN/Inf produced by a forward op on finite inputs.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Corrupt or truncated checkpoint / unknown file layout.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Invalid run configuration (schema violations, unknown keys, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Training loss blew up or went non-finite.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

}  // namespace matquant
