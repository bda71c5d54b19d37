#pragma once

#include <stdexcept>
#include <string>

namespace cadvae {

// Error taxonomy. Each type corresponds to one family of documented
// contract violations so callers (and the CLI) can map them to exit codes.

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Math domain violations (log of non-positive input, ...).
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite inputs, indefinite covariance matrices, ...
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A documented precondition on argument *state* was violated
// (unfrozen parameters, non-detached latents, rows not summing to 1).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Wrong call pattern: second backward on a graph, empty batch, ...
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RangeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LabelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Serialized artifact (dataset / checkpoint) violates its format.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a grouped estimator is asked for an empty group; the batch
// iterator never produces one, so this signals misuse at the API boundary.
struct GroupSkipSignal : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A fairness metric was asked to compare against a group with no members.
struct UndefinedGroupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss or parameter; carries the term name.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& term)
        : std::runtime_error("divergence in term '" + term + "'"), term_(term) {}
    const std::string& term() const { return term_; }

  private:
    std::string term_;
};

}  // namespace cadvae
