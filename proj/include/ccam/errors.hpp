#pragma once

#include <stdexcept>
#include <string>

namespace ccam {

// Tensor shape or argument contract violated by the caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A configuration file or key could not be interpreted.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reading or writing a file failed. The message names the path or record id.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint magic, version, or layout does not match what the reader expects.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss or activation became non-finite during optimization.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Model and dataset disagree on the number of classes.
class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ccam
