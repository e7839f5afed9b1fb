#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tc3dgs {

// Raised for violated preconditions: bad shapes, out-of-range settings.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a container or scene file cannot be decoded. `offset` is the
// byte position at which decoding gave up.
class DecodeError : public std::runtime_error {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Wraps a failure inside one pipeline stage so callers can tell which stage broke.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace tc3dgs
