#pragma once

#include <stdexcept>
#include <string>

namespace gem {

// Non-finite values or numerically unusable inputs (CLI exit code 3).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed files, configs, or datasets (CLI exit code 2).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gem
