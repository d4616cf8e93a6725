#pragma once

#include <stdexcept>
#include <string>

namespace pivm {

/// Failure categories. Each maps to a distinct CLI exit code.
enum class ErrorKind {
    internal,
    config,
    io,
    corruption,
    shape,
    divergence,
    undefined_metric,
};

const char* to_string(ErrorKind kind);
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace pivm
