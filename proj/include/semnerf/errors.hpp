#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace semnerf {

enum class ErrorKind {
  kInput,    // caller passed a value outside the operation's domain
  kConfig,   // structural mismatch between configured shapes
  kData,     // file contents or dataset records are inconsistent
  kNumeric,  // non-finite values produced or consumed
  kIo,       // filesystem failure
  kRequest,  // service-level request validation
  kInvariant,  // an internal contract was violated at run time
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Request errors carry a machine-readable code for the HTTP layer.
class RequestError : public Error {
 public:
  RequestError(std::string code, const std::string& message)
      : Error(ErrorKind::kRequest, message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace semnerf
