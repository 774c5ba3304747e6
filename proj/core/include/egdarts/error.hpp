#pragma once

#include <stdexcept>
#include <string>

namespace egdarts {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// stable exit codes: config 2, data 3, degenerate decision input 4, any
// other numeric failure 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

// Shape mismatches are numeric failures; the message names the offending
// dimension.
struct ShapeError : NumericError {
  using NumericError::NumericError;
};

struct DegenerateFrontError : Error {
  using Error::Error;
};

}  // namespace egdarts
