#pragma once

#include <stdexcept>
#include <string>

namespace bct {

// All library failures derive from Error so callers can catch one type; the
// subclasses exist so the CLI can map them to distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

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

// Rethrows `e` as the same error class with a "token N: " prefix.
[[noreturn]] void rethrow_with_token(const Error& e, std::size_t token);

}  // namespace bct
