#pragma once

#include <stdexcept>
#include <string>

namespace eib {

enum class ErrorKind {
    InvalidShape,
    InvalidLabel,
    StaleTape,
    Spec,
    Vocab,
    Integration,
    Corpus,
    Surgery,
    Training,
    Step,
    Alignment,
    Task,
    Config,
    Dependency,
    Format,
};

const char* to_string(ErrorKind kind);

// Process exit code the CLI reports for an error of this kind.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace eib
