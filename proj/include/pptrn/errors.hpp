#pragma once

#include <stdexcept>
#include <string>

namespace pptrn {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes (usage 2, I/O 3, contract 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents. Message names the offending shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by an op.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (image headers, manifests, configs).
class ParseError : public Error {
 public:
  using Error::Error;
};

// File cannot be opened, read, or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// Image/tensor size violates an operation's precondition.
class SizeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A documented invariant was about to be broken (e.g. updating frozen weights).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Checkpoint container failed a length or integrity check.
class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace pptrn
