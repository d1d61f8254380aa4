#pragma once

#include <stdexcept>
#include <string>

namespace stratfit {

// Malformed or degenerate input data. The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure during fitting or inference. The CLI maps this to exit
// code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stratfit
