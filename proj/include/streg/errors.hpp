// Error taxonomy shared across the toolkit. The CLI maps these onto its
// stable exit codes: usage 2, data 3, numerical 4.

#pragma once

#include <stdexcept>
#include <string>

namespace streg {

/// Malformed invocation: bad flags, bad config keys, impossible requests.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Corrupt or invalid data: parse failures, violated invariants on inputs.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: singular systems, non-finite losses or gradients.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace streg
