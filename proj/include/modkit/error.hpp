#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace modkit {

enum class ErrorKind {
  InvalidParams,
  Range,
  Domain,
  Dimension,
  Numeric,
  Convergence,
  Dataset,
  Training,
  Parse,
  Validation,
  Io,
  Aborted,
  Infeasible,
  Internal,
};

// Stable machine-readable prefixes; the CLI prints `modkit: <prefix>: <msg>`.
constexpr std::string_view error_prefix(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidParams: return "invalid-params";
    case ErrorKind::Range: return "range-error";
    case ErrorKind::Domain: return "domain-error";
    case ErrorKind::Dimension: return "dimension-error";
    case ErrorKind::Numeric: return "numeric-error";
    case ErrorKind::Convergence: return "convergence-error";
    case ErrorKind::Dataset: return "dataset-error";
    case ErrorKind::Training: return "training-error";
    case ErrorKind::Parse: return "parse-error";
    case ErrorKind::Validation: return "validation-error";
    case ErrorKind::Io: return "io-error";
    case ErrorKind::Aborted: return "aborted";
    case ErrorKind::Infeasible: return "infeasible-design";
    case ErrorKind::Internal: return "internal-error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& message, double residual)
      : Error(ErrorKind::Convergence, message), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& message, std::size_t step)
      : Error(ErrorKind::Numeric, message), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, int epoch)
      : Error(ErrorKind::Training, message), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error(ErrorKind::Validation, field + ": " + message),
        field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t line)
      : Error(ErrorKind::Parse, "line " + std::to_string(line) + ": " + message),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace modkit
