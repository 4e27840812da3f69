#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace emotts {

// A caller broke the documented precondition of an operation.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad user input: malformed files, empty prompts, unknown flags. CLI exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A model or modality the request needs is not loaded. Reported as an input error.
class ConfigurationError : public InputError {
 public:
  using InputError::InputError;
};

// Malformed byte stream or text file; carries the failing location.
class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::size_t location)
      : InputError(what), location_(location) {}
  std::size_t location() const { return location_; }

 private:
  std::size_t location_;
};

// A pipeline stage was asked for before its prerequisites exist. CLI exit code 3.
class DependencyError : public std::runtime_error {
 public:
  DependencyError(const std::string& what, std::string missing_stage)
      : std::runtime_error(what), missing_stage_(std::move(missing_stage)) {}
  const std::string& missing_stage() const { return missing_stage_; }

 private:
  std::string missing_stage_;
};

// Training diverged (NaN/Inf loss). CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli_exit {
inline constexpr int kOk = 0;
inline constexpr int kInputError = 2;
inline constexpr int kDependencyError = 3;
inline constexpr int kNumericalAbort = 4;
}  // namespace cli_exit

}  // namespace emotts

#define EMOTTS_EXPECTS(cond, msg)                                              \
  do {                                                                         \
    if (!(cond)) throw ::emotts::ContractViolation(std::string("contract: ") + \
                                                   (msg));                     \
  } while (0)
