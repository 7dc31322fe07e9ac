#pragma once

#include <stdexcept>
#include <string>

namespace sef {

// Bad arguments or preconditions. The CLI maps these to exit code 1.
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Inconsistent configuration, e.g. overlapping train/test seed ranges.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or truncated checkpoint / manifest content.
struct FormatError : IoError {
  using IoError::IoError;
};

// Operation invoked on an object that is not ready for it.
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InternalError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace sef
