#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace s4rec {

// Error taxonomy, mapped to process exit codes by the CLI:
//   ConfigError  -> 2   bad hyperparameters, malformed/unknown config keys
//   DataError    -> 3   unreadable or degenerate input data
//   NumericError -> 4   non-finite values, numerical aborts
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/contract violations inside the tensor layer. These indicate a bug in
// the calling code rather than bad user input.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace s4rec
