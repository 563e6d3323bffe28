#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedstar {

/// Operand dimensions do not chain (matrix products, parameter sets, batches).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar or configuration argument is outside its allowed range.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training or evaluation requested on data that cannot support it
/// (empty batch, client without labels, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Experiment file problem; `line()` is 1-based, 0 when the error is not tied
/// to a specific line (e.g. a missing required key).
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace fedstar
