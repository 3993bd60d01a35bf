#pragma once

#include <stdexcept>
#include <string>

namespace hyperbo {

// Bad input: schema violation, out-of-range argument, violated precondition.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical breakdown that survived every recovery attempt (e.g. the full
// jitter ladder). The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hyperbo
