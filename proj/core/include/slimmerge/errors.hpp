#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace slimmerge {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two matrices (or layer sets) that must agree in shape do not.
class DimMismatchError : public Error {
 public:
  explicit DimMismatchError(const std::string& layer, const std::string& detail = {})
      : Error("dimension mismatch at layer '" + layer + "'" +
              (detail.empty() ? "" : ": " + detail)),
        layer_(layer) {}
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

/// A layer name present on one side of an operation is missing on the other.
class MissingLayerError : public Error {
 public:
  explicit MissingLayerError(const std::string& name)
      : Error("missing layer '" + name + "'"), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

/// Corrupt or malformed tensor file. Carries the byte offset of the defect.
class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : Error("format error at offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Filesystem-level failure that is not a format defect.
class IoError : public Error {
 public:
  using Error::Error;
};

/// SyntheticSpec invariant violation.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Static-merge coefficient vector length does not equal the task count.
class CoeffLenMismatchError : public Error {
 public:
  CoeffLenMismatchError(std::size_t got, std::size_t expected)
      : Error("coefficient count " + std::to_string(got) + " does not match task count " +
              std::to_string(expected)) {}
};

/// SVD failed to converge within the backend's iteration cap.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// Requested truncation rank outside [0, k].
class RankOutOfRangeError : public Error {
 public:
  RankOutOfRangeError(long long r, long long k)
      : Error("rank " + std::to_string(r) + " outside [0, " + std::to_string(k) + "]") {}
};

/// Loss became NaN/Inf during an optimization run (bad learning rate or beta).
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(int iteration)
      : Error("loss became non-finite at iteration " + std::to_string(iteration)),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

/// Routing target task id outside [0, T).
class TaskOutOfRangeError : public Error {
 public:
  TaskOutOfRangeError(int task_id, int task_count)
      : Error("task id " + std::to_string(task_id) + " outside [0, " +
              std::to_string(task_count) + ")") {}
};

/// Factor set is missing the pair for a (component, layer) the operation needs.
class MissingFactorError : public Error {
 public:
  MissingFactorError(const std::string& component, const std::string& layer)
      : Error("missing factor pair for component '" + component + "', layer '" + layer + "'") {}
};

/// A required storage-accounting parameter was not supplied.
class MissingParamError : public Error {
 public:
  explicit MissingParamError(const std::string& name)
      : Error("missing accounting parameter '" + name + "'"), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

/// No integer rank assignment can meet the requested budget window.
class InfeasibleBudgetError : public Error {
 public:
  using Error::Error;
};

/// Configuration field failed validation. Carries the offending field name.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : Error("invalid config field '" + field + "': " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace slimmerge
