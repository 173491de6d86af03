#pragma once

#include <stdexcept>
#include <string>

namespace ildlab {

// Base for everything thrown by the library. The CLI catches this type,
// writes a failure marker and exits nonzero; anything else escaping is a bug.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension mismatch in a tensor op. Message names both shapes.
struct DimError : Error {
    using Error::Error;
};

// Violated API contract: backward called twice, tensors from different tapes
// mixed in one op, grad read before backward, and the like.
struct ContractError : Error {
    using Error::Error;
};

// Bad or inconsistent experiment configuration (unknown key, out-of-range
// value, divisibility violation). Message carries the offending config path.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed dataset or checkpoint input.
struct DataError : Error {
    using Error::Error;
};

// Numeric guard tripped: non-finite loss, zero-norm vector fed to a
// normalizer, degenerate distribution where one was required.
struct NumericError : Error {
    using Error::Error;
};

} // namespace ildlab
