#pragma once

#include <stdexcept>
#include <string>

namespace simmc {

// Error taxonomy. Everything user-facing derives from SimmcError so the CLI
// can map failures to exit codes in one place.
struct SimmcError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched tensor shapes or malformed dimensions.
struct ShapeError : SimmcError {
    using SimmcError::SimmcError;
};

// A caller broke an API contract (e.g. non-scalar backward root).
struct ContractError : SimmcError {
    using SimmcError::SimmcError;
};

// Classification target outside the valid label range.
struct LabelError : SimmcError {
    using SimmcError::SimmcError;
};

// Numerically degenerate input (e.g. zero-norm vector in a cosine).
struct DegenerateInputError : SimmcError {
    using SimmcError::SimmcError;
};

// Invalid run or model configuration.
struct ConfigError : SimmcError {
    using SimmcError::SimmcError;
};

// Missing or unusable data (empty corpus, no labeled turns, sampling
// constraints that cannot be met).
struct DataError : SimmcError {
    using SimmcError::SimmcError;
};

// File could not be parsed at all.
struct ParseError : SimmcError {
    using SimmcError::SimmcError;
};

// File parsed but violates an internal consistency rule (dangling object
// reference, truncated payload, shape mismatch against the header).
struct IntegrityError : SimmcError {
    using SimmcError::SimmcError;
};

// Versioned format or objective tag does not match what the consumer expects.
struct CompatError : SimmcError {
    using SimmcError::SimmcError;
};

// A model is missing a capability the caller asked for (e.g. a multi-task
// head that was disabled during training).
struct CapabilityError : SimmcError {
    using SimmcError::SimmcError;
};

// Training diverged or hit non-finite numbers; the driver saves the last
// good checkpoint before throwing this.
struct TrainingAbort : SimmcError {
    using SimmcError::SimmcError;
};

// Metric evaluation on empty or misaligned inputs.
struct EvalError : SimmcError {
    using SimmcError::SimmcError;
};

}  // namespace simmc
