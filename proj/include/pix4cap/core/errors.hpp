#pragma once

#include <stdexcept>
#include <string>

namespace pix4cap {

// Process exit codes shared by every CLI command.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kData = 3,
  kDivergence = 4,
};

// Bad flags, config keys or argument combinations.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or missing dataset files, checkpoints and images.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape disagreement inside the compute graph.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Loss became NaN or infinite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pix4cap
