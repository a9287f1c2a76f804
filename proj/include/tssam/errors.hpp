#pragma once

#include <stdexcept>
#include <string>

namespace tssam {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree with an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a diverged computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid model/train configuration; raised before any allocation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data outside its domain (non-binary targets, bad ranges, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or image decoding failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given input (e.g. weighted F on an empty mask).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrc {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  manifest,
  checksum,
};

inline const char* to_string(CheckpointErrc c) {
  switch (c) {
    case CheckpointErrc::io: return "io";
    case CheckpointErrc::bad_magic: return "bad_magic";
    case CheckpointErrc::version_mismatch: return "version_mismatch";
    case CheckpointErrc::truncated: return "truncated";
    case CheckpointErrc::manifest: return "manifest";
    case CheckpointErrc::checksum: return "checksum";
  }
  return "unknown";
}

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : Error(std::string("checkpoint ") + to_string(code) + ": " + what), code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

}  // namespace tssam
