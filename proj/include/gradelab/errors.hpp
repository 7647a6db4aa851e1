#pragma once

#include <stdexcept>
#include <string>

namespace gradelab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration or data that violates a type invariant.
struct ValidationError : Error {
    using Error::Error;
};

// Unreadable files, malformed rows, unparsable model replies.
struct ParseError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Prompt (or request) exceeds the configured context budget; callers may
// shrink the batch and retry.
struct ContextBudgetError : Error {
    using Error::Error;
};

struct BackendError : Error {
    enum class Kind { transport, auth, replay_miss, other };

    BackendError(Kind k, const std::string& msg) : Error(msg), kind(k) {}

    Kind kind;
};

}  // namespace gradelab
