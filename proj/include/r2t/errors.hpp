#pragma once

#include <stdexcept>
#include <string>

namespace r2t {

// Shape or precondition violated by the caller. CLI exit code 1.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite value entered or left a numeric kernel.
class NumericDomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Invalid configuration value (sizes, counts, unknown ids).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// File could not be read/written or failed its integrity check. CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrityError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace r2t
