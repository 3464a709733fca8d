#include "streetgaze/error.hpp"

namespace streetgaze {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "invalid-argument";
        case ErrorKind::Parse: return "parse-error";
        case ErrorKind::Io: return "io-error";
        case ErrorKind::Validation: return "validation-error";
        case ErrorKind::NotFound: return "not-found";
        case ErrorKind::Conflict: return "conflict";
        case ErrorKind::NoMorePairs: return "no-more-pairs";
        case ErrorKind::TooLarge: return "too-large";
        case ErrorKind::Unauthorized: return "unauthorized";
        case ErrorKind::EmptyHighlightRegion: return "empty-highlight-region";
        case ErrorKind::StratumUnderflow: return "stratum-underflow";
        case ErrorKind::InsufficientData: return "insufficient-data";
    }
    return "unknown";
}

}  // namespace streetgaze
