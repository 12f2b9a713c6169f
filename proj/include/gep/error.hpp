#pragma once

#include <stdexcept>
#include <string>

namespace gep {

/// Error categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind : int {
  kInternal = 1,
  kConfig = 2,
  kIo = 3,
  kStageOrder = 4,
  kShape = 5,
  kRange = 6,
  kDomain = 7,
  kParameter = 8,
  kDivergence = 9,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

// Shape mismatch, non-scalar output, wrong sequence pairing.
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::kShape, w) {}
};

// Index outside a valid range: event coordinates, windows, capacity.
struct RangeError : Error {
  explicit RangeError(const std::string& w) : Error(ErrorKind::kRange, w) {}
};

// Mathematical domain violation (zero vectors under cosine, log of <= 0).
struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error(ErrorKind::kDomain, w) {}
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& w)
      : Error(ErrorKind::kParameter, w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfig, w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};

struct StageOrderError : Error {
  explicit StageOrderError(const std::string& w)
      : Error(ErrorKind::kStageOrder, w) {}
};

struct DivergenceError : Error {
  DivergenceError(const std::string& w, long step)
      : Error(ErrorKind::kDivergence, w), step(step) {}
  long step;
};

}  // namespace gep
