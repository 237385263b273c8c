#pragma once

#include <stdexcept>
#include <string>

namespace driftwatch {

// Error taxonomy shared by the library and the CLI. The CLI maps kinds to
// exit codes: usage/input problems exit 2, runtime/numeric failures exit 3.
enum class ErrorKind {
    config,      // invalid configuration value or unknown key
    schema,      // file header does not match the expected grid/format
    ordering,    // timestamps out of order
    format,      // unparsable cell, line, or field
    input,       // bad runtime input (empty batch, non-finite value, ...)
    fit,         // not enough data to fit a statistic
    corrupt,     // truncated or inconsistent serialized payload
    io,          // filesystem failure
    numeric,     // numerical breakdown (e.g. covariance not positive definite)
    divergence,  // training loss became non-finite
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    const char* kind_name() const {
        switch (kind_) {
            case ErrorKind::config: return "config";
            case ErrorKind::schema: return "schema";
            case ErrorKind::ordering: return "ordering";
            case ErrorKind::format: return "format";
            case ErrorKind::input: return "input";
            case ErrorKind::fit: return "fit";
            case ErrorKind::corrupt: return "corrupt";
            case ErrorKind::io: return "io";
            case ErrorKind::numeric: return "numeric";
            case ErrorKind::divergence: return "divergence";
        }
        return "unknown";
    }

    // 2 = usage/input, 3 = runtime/divergence.
    int exit_code() const {
        switch (kind_) {
            case ErrorKind::numeric:
            case ErrorKind::divergence:
                return 3;
            default:
                return 2;
        }
    }

private:
    ErrorKind kind_;
};

}  // namespace driftwatch
