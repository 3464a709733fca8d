#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace streetgaze {

enum class ErrorKind {
    InvalidArgument,
    Parse,
    Io,
    Validation,
    NotFound,
    Conflict,
    NoMorePairs,
    TooLarge,
    Unauthorized,
    EmptyHighlightRegion,
    StratumUnderflow,
    InsufficientData,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so the CLI can pick an
// exit code and the HTTP layer a status code without string matching.
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

}  // namespace streetgaze
