#pragma once

#include <stdexcept>
#include <string>

namespace mca {

/// Tensor extents do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (attention variant, kernel size, training recipe...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Base class for everything the file readers reject. Readers never return
/// partially decoded data; they throw one of the subclasses below instead.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input file does not exist or cannot be opened.
class NotFoundError : public IoError {
 public:
  using IoError::IoError;
};

/// Bad magic number or structurally impossible header.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Known magic, unsupported version.
class VersionError : public IoError {
 public:
  using IoError::IoError;
};

/// File ends before the header says it should.
class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};

/// File length is not a whole number of fixed-size records.
class AlignmentError : public IoError {
 public:
  using IoError::IoError;
};

/// Headers of paired files disagree (image count vs label count, ...).
class DimensionError : public IoError {
 public:
  using IoError::IoError;
};

/// Non-finite loss or gradient during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mca
