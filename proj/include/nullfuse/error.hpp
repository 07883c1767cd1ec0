#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace nullfuse {

enum class ErrorKind {
  shape,
  rank_deficient,
  convergence,
  validation,
  io,
  format,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::rank_deficient: return "rank_deficient";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::validation: return "validation";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
  }
  return "unknown";
}

/// Base class for every error raised by the library. The kind is stable and
/// machine-readable; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error(ErrorKind::shape, message) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message)
      : Error(ErrorKind::validation, message) {}
};

class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& message)
      : Error(ErrorKind::convergence, message) {}
};

/// Raised by thin_qr when a diagonal entry of R collapses. `column` is the
/// zero-based index of the first offending column.
class RankDeficientError : public Error {
 public:
  RankDeficientError(std::size_t column, const std::string& message)
      : Error(ErrorKind::rank_deficient, message), column_(column) {}

  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t column_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error(ErrorKind::io, message) {}
};

/// Stage of checkpoint decoding at which a malformed input was rejected.
enum class FormatStage { header, json, offsets, dtype, data, pairing };

inline std::string_view to_string(FormatStage stage) {
  switch (stage) {
    case FormatStage::header: return "header";
    case FormatStage::json: return "json";
    case FormatStage::offsets: return "offsets";
    case FormatStage::dtype: return "dtype";
    case FormatStage::data: return "data";
    case FormatStage::pairing: return "pairing";
  }
  return "unknown";
}

class FormatError : public Error {
 public:
  FormatError(FormatStage stage, const std::string& message)
      : Error(ErrorKind::format, std::string(to_string(stage)) + ": " + message),
        stage_(stage) {}

  FormatStage stage() const noexcept { return stage_; }

 private:
  FormatStage stage_;
};

}  // namespace nullfuse
