#pragma once

#include <stdexcept>
#include <string>

namespace nafx {

// Broad failure classes. The CLI maps these onto exit codes and the HTTP
// facade onto status codes, so keep the set small.
enum class ErrorKind {
  kInvalidArgument,  // bad user input: shapes, ranges, flags
  kIo,               // file could not be opened/read/written
  kFormat,           // malformed or unsupported file contents
  kNumerical,        // NaN/Inf encountered during training
  kFitFailure,       // decay analysis could not fit a line
  kBelowGate,        // loudness measurement fully gated out
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::kInvalidArgument, what);
}

}  // namespace nafx
