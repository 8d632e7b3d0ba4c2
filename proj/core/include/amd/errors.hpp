// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace amd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between tensors; message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside its mathematical domain (gamma <= 0, label out of range, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// API precondition violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Object used in a state that forbids the operation (e.g. second backward).
class StateError : public Error {
 public:
  using Error::Error;
};

// Structural mask violates its invariants (empty layer, size mismatch).
class MaskError : public Error {
 public:
  using Error::Error;
};

// Problems with input data streams (empty stream, bad split).
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed persisted artifact (bad magic, bad record layout).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Structurally valid container with inconsistent directory/payload.
class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Non-finite loss or gradient during training; message carries the culprit.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Requested scale unreachable under the pruning guard.
class PruningError : public Error {
 public:
  PruningError(const std::string& msg, double min_reachable)
      : Error(msg), min_reachable_scale(min_reachable) {}
  double min_reachable_scale;
};

// No eligible teacher-assistant candidate.
class SelectionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace amd
