#pragma once

#include <stdexcept>
#include <string>

#include "gpssm/types.hpp"

namespace gpssm {

// Factorization failed even at the maximum jitter level.
class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, double attempted_jitter)
      : std::runtime_error(what), attempted_jitter_(attempted_jitter) {}

  double attempted_jitter() const { return attempted_jitter_; }

 private:
  double attempted_jitter_;
};

// Every particle weight collapsed to -inf at some filter step.
class DegenerateWeightsError : public std::runtime_error {
 public:
  DegenerateWeightsError(const std::string& what, Index time_index)
      : std::runtime_error(what), time_index_(time_index) {}

  Index time_index() const { return time_index_; }

 private:
  Index time_index_;
};

// Non-finite value produced by a numeric routine; names the offender.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::string parameter)
      : std::runtime_error(what), parameter_(std::move(parameter)) {}

  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file; carries a 1-based line number when known.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, long line = -1)
      : std::runtime_error(what), line_(line) {}

  long line() const { return line_; }

 private:
  long line_;
};

// Bad configuration; carries the offending field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::string field_path = "")
      : std::runtime_error(what), field_path_(std::move(field_path)) {}

  const std::string& field_path() const { return field_path_; }

 private:
  std::string field_path_;
};

}  // namespace gpssm
