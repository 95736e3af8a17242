#include "eib/error.hpp"

namespace eib {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidShape: return "invalid-shape";
        case ErrorKind::InvalidLabel: return "invalid-label";
        case ErrorKind::StaleTape: return "stale-tape";
        case ErrorKind::Spec: return "spec";
        case ErrorKind::Vocab: return "vocab";
        case ErrorKind::Integration: return "integration";
        case ErrorKind::Corpus: return "corpus";
        case ErrorKind::Surgery: return "surgery";
        case ErrorKind::Training: return "training";
        case ErrorKind::Step: return "step";
        case ErrorKind::Alignment: return "alignment";
        case ErrorKind::Task: return "task";
        case ErrorKind::Config: return "config";
        case ErrorKind::Dependency: return "dependency";
        case ErrorKind::Format: return "format";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Spec:
        case ErrorKind::Task: return 2;
        case ErrorKind::Dependency: return 3;
        case ErrorKind::Training: return 4;
        case ErrorKind::Format: return 5;
        default: return 1;
    }
}

}  // namespace eib
