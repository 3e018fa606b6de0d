#pragma once

#include <stdexcept>
#include <string>

namespace enclab {

// Error categories map onto CLI exit codes: config 2, data 3, numeric 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A batch with no usable positions (all ignored / all special).
struct DegenerateBatchError : DataError {
  explicit DegenerateBatchError(const std::string& msg) : DataError(msg) {}
};

// A benchmark window too short to produce a trustworthy number.
struct MeasurementError : DataError {
  explicit MeasurementError(const std::string& msg) : DataError(msg) {}
};

// Violated preconditions on tensor shapes, indices, or op contracts.
struct ContractError : std::invalid_argument {
  explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace enclab
