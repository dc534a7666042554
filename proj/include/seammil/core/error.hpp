#pragma once

#include <stdexcept>
#include <string>

namespace seammil {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes disagree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An AffineSpec that cannot be applied (bad factor, collapsed output).
class InvalidSpecError : public Error {
 public:
  using Error::Error;
};

// A correlation row sums to zero, so refinement has no convex weights.
class DegenerateAffinityError : public Error {
 public:
  using Error::Error;
};

// NaN or inf produced inside the network; the message names the layer.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Input data failed validation (e.g. a DR grade outside 0..4).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A metric has no defined value for the input, e.g. AUROC with one class.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// lr_schedule asked for a step beyond the planned horizon.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string shape_str(int c, int h, int w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

}  // namespace detail

}  // namespace seammil
