#pragma once

#include <stdexcept>
#include <string>

namespace editlab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or size disagreement between tensors / sequences.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : Error {
    using Error::Error;
};

// A precondition stated by an operation's contract was violated.
struct ContractError : Error {
    using Error::Error;
};

// Training diverged (NaN/Inf loss).
struct TrainingError : Error {
    using Error::Error;
};

// An edit failed to converge or was applied to an incompatible model.
struct EditError : Error {
    using Error::Error;
};

// File I/O or format problems.
struct IoError : Error {
    using Error::Error;
};

// Generated benchmark failed its quality gates.
struct QualityError : Error {
    using Error::Error;
};

}  // namespace editlab
