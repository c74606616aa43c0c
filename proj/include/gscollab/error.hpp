#pragma once

#include <stdexcept>
#include <string>

namespace gscollab {

enum class ErrorCode {
  InvalidArgument,
  DegenerateGaussian,
  DecodeError,
  InvalidLabel,
  InvalidParams,
  StateError,
  SpecError,
  ConfigError,
  Divergence,
  Io,
};

const char* to_string(ErrorCode code) noexcept;

/// Base of every exception thrown by the library. `code()` lets callers
/// (and tests) tell the failure classes apart without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorCode::InvalidArgument, what) {}
};

class DegenerateGaussian : public Error {
 public:
  explicit DegenerateGaussian(const std::string& what)
      : Error(ErrorCode::DegenerateGaussian, what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorCode::StateError, what) {}
};

enum class DecodeFailure { BadMagic, VersionMismatch, Truncated, NonFinite, BadField, TrailingBytes };

const char* to_string(DecodeFailure f) noexcept;

/// Binary decode failure (VOXG, GMSG, FPRM); `failure()` names the cause.
class DecodeError : public Error {
 public:
  DecodeError(DecodeFailure failure, const std::string& what)
      : Error(ErrorCode::DecodeError, what), failure_(failure) {}
  DecodeFailure failure() const noexcept { return failure_; }

 private:
  DecodeFailure failure_;
};

}  // namespace gscollab
