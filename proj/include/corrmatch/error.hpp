#pragma once

#include <stdexcept>
#include <string>

namespace corrmatch {

// Precondition and shape violations are reported with std::invalid_argument.
// The three types below map onto the CLI exit codes.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Degenerate geometry, non-finite losses and similar numerical breakdowns.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace corrmatch
