#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace tavlo {

// Exit codes used by the command-line front end.
enum class ErrorKind {
  kInvalidInput = 3,
  kInvalidConfig = 2,
  kData = 3,
  kEmptySet = 3,
  kIo = 3,
  kNumerical = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct InvalidInput : Error {
  explicit InvalidInput(const std::string& w) : Error(ErrorKind::kInvalidInput, w) {}
};
struct InvalidConfig : Error {
  explicit InvalidConfig(const std::string& w) : Error(ErrorKind::kInvalidConfig, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::kData, w) {}
};
struct EmptySetError : Error {
  explicit EmptySetError(const std::string& w) : Error(ErrorKind::kEmptySet, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::kNumerical, w) {}
};

// Non-fatal conditions reported by operations that degrade gracefully
// (empty sampling results, zero-norm cosines, skipped events).
struct Diagnostics {
  std::vector<std::string> warnings;
  std::size_t zero_norm_count = 0;

  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
};

}  // namespace tavlo
