#pragma once

#include <stdexcept>
#include <string>

namespace scrub {

// Base class for every error thrown by the library. The CLI maps the two
// branches below onto distinct exit codes, so new error types should derive
// from one of them rather than from Error directly.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user input: shapes, ranges, masks, file contents that fail validation.
struct ValidationError : Error {
  using Error::Error;
};

// Failures while executing an otherwise valid request: I/O, corrupt
// archives, diverging training runs.
struct RuntimeFailure : Error {
  using Error::Error;
};

struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};

struct ValueError : ValidationError {
  using ValidationError::ValidationError;
};

struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};

// Raised when a flattened mask leaves no background column to attend to.
struct DegenerateMaskError : ValidationError {
  using ValidationError::ValidationError;
};

struct IoError : RuntimeFailure {
  using RuntimeFailure::RuntimeFailure;
};

struct ArchiveError : RuntimeFailure {
  using RuntimeFailure::RuntimeFailure;
};

struct VersionError : ArchiveError {
  using ArchiveError::ArchiveError;
};

struct CorpusError : RuntimeFailure {
  using RuntimeFailure::RuntimeFailure;
};

struct IntegrityError : CorpusError {
  using CorpusError::CorpusError;
};

struct TrainingError : RuntimeFailure {
  using RuntimeFailure::RuntimeFailure;
};

}  // namespace scrub
