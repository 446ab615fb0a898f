#pragma once

#include <stdexcept>
#include <string>

namespace wsdet {

// Raised for malformed files, unreadable inputs and bad configuration.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an operation's preconditions are violated by its arguments.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace wsdet
