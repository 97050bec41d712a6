#pragma once

#include <stdexcept>
#include <string>

namespace fedtl {

// Caller broke a documented precondition (dimension mismatch, bad index, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN or Inf showed up inside an optimization.
class SolverDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StaleAnchorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyPopulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DecodeError : public std::runtime_error {
 public:
  DecodeError(std::string field, const std::string& what)
      : std::runtime_error("decode error in field '" + field + "': " + what),
        field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}
}  // namespace detail

}  // namespace fedtl
