#ifndef CNF_ERRORS_HPP
#define CNF_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cnf {

// Invalid argument values, malformed inputs, violated preconditions.
class ArgumentError : public std::runtime_error {
public:
  explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

// A tour violates a problem constraint; the message names the first violation.
class FeasibilityError : public std::runtime_error {
public:
  explicit FeasibilityError(const std::string& msg) : std::runtime_error(msg) {}
};

// All coordinates identical: min-max normalization is undefined.
class DegenerateInstanceError : public std::runtime_error {
public:
  explicit DegenerateInstanceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Exact solver invoked beyond its size limit.
class SizeLimitError : public std::runtime_error {
public:
  explicit SizeLimitError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values encountered in a numeric computation.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File parse failure; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& msg, int line = 0)
      : std::runtime_error(line > 0 ? msg + " (line " + std::to_string(line) + ")" : msg),
        line_(line) {}
  int line() const { return line_; }

private:
  int line_;
};

// File format recognized but not supported (e.g. non-EUC_2D edge weights).
class UnsupportedFormatError : public std::runtime_error {
public:
  explicit UnsupportedFormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint cannot be loaded into the requested configuration.
class IncompatibleCheckpointError : public std::runtime_error {
public:
  explicit IncompatibleCheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Required file or precomputed artifact is missing.
class MissingInputError : public std::runtime_error {
public:
  explicit MissingInputError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cnf

#endif
