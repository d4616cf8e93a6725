#include "pivm/error.hpp"

namespace pivm {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::internal: return "internal";
        case ErrorKind::config: return "config";
        case ErrorKind::io: return "io";
        case ErrorKind::corruption: return "corruption";
        case ErrorKind::shape: return "shape";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::undefined_metric: return "undefined-metric";
    }
    return "internal";
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::internal: return 1;
        case ErrorKind::config: return 2;
        case ErrorKind::io: return 3;
        case ErrorKind::corruption: return 4;
        case ErrorKind::shape: return 5;
        case ErrorKind::divergence: return 6;
        case ErrorKind::undefined_metric: return 7;
    }
    return 1;
}

}  // namespace pivm
