#pragma once

#include <stdexcept>
#include <string>

namespace kddetr {

// Base of every error raised by the library. The CLI maps all of these to exit
// status 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A real-valued function evaluated outside its domain (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Out-of-range scalar parameter (temperature, learning rate, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed input data (NaN costs, corrupt files).
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Distillation setup that cannot work (missing teacher, width mismatch).
class SetupError : public Error {
 public:
  using Error::Error;
};

// Teacher and student were not evaluated on the same distillation points.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Metric requested over an empty dataset.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace kddetr
