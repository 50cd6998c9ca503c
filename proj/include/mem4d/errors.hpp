#pragma once

#include <stdexcept>
#include <string>

namespace mem4d {

/// Tensor extents that cannot be combined by the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An argument outside the operation's domain (negative distance, bad factor, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value that the model or CLI cannot honour.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input data (image extents, non-finite pointmaps, ...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while streaming a sequence; carries the offending frame index.
class StreamError : public std::runtime_error {
 public:
  StreamError(const std::string& what, long frame)
      : std::runtime_error(what + " (frame " + std::to_string(frame) + ")"), frame_(frame) {}
  long frame() const noexcept { return frame_; }

 private:
  long frame_;
};

/// File-system or container-format failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mem4d
