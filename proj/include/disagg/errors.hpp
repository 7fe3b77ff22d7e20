#pragma once

#include <stdexcept>
#include <string>

namespace disagg {

// Exit-code taxonomy used by the CLI: usage -> 1, data -> 2, numeric -> 3.
// Everything raised by the library is one of these three (InternalError is a
// bug guard and maps to the numeric exit code).

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files, dimension/alignment mismatches, invalid geometry, schema
// violations, provenance mismatches, missing values without --na-action.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unrecoverable numerical failure (factorization breakdown, non-finite
// objective at the initial point, degenerate sampler).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated preconditions that indicate a caller bug, not bad user data.
struct InternalError : std::logic_error {
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace disagg
