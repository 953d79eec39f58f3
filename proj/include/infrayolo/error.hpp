#pragma once

#include <stdexcept>
#include <string>

namespace infrayolo {

enum class ErrorKind {
  Shape,
  Argument,
  Graph,
  Autograd,
  Config,
  Io,
  Numeric,
};

const char* to_string(ErrorKind kind);

// Single exception type used across the library. The kind lets callers (the
// CLI in particular) map failures onto structured diagnostics.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace infrayolo
