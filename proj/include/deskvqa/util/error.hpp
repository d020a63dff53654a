#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace deskvqa {

enum class ErrorKind {
  MalformedArchive,
  MissingColumn,
  EmptyFile,
  NoAnswers,
  UnreadableImage,
  ExtractorUnavailable,
  SchemaViolation,
  DimensionMismatch,
  ShapeError,
  CorruptArtifact,
  VersionMismatch,
  EmptyAnswerSpace,
  EmptyQuestion,
  Diverged,
  Interrupted,
  TokenMapMismatch,
  OutOfBounds,
  InvalidConfig,
  Io,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedArchive: return "MalformedArchive";
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::EmptyFile: return "EmptyFile";
    case ErrorKind::NoAnswers: return "NoAnswers";
    case ErrorKind::UnreadableImage: return "UnreadableImage";
    case ErrorKind::ExtractorUnavailable: return "ExtractorUnavailable";
    case ErrorKind::SchemaViolation: return "SchemaViolation";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::CorruptArtifact: return "CorruptArtifact";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::EmptyAnswerSpace: return "EmptyAnswerSpace";
    case ErrorKind::EmptyQuestion: return "EmptyQuestion";
    case ErrorKind::Diverged: return "Diverged";
    case ErrorKind::Interrupted: return "Interrupted";
    case ErrorKind::TokenMapMismatch: return "TokenMapMismatch";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

/// Every library failure is reported as an Error carrying a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace deskvqa
