#pragma once

#include <stdexcept>
#include <string>

namespace cfprobe {

/// Input violates a documented precondition (bad spec, bad record, bad prompt).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor or image shapes disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical breakdown: zero alpha_bar, NaN loss, non-finite weights.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Persisted artifact is missing, truncated, corrupt, or from an incompatible build.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cfprobe
