#pragma once

#include <stdexcept>
#include <string>

namespace stagekit {

// Failure categories. Each maps onto one CLI exit status.
enum class ErrorKind {
  validation = 1,  // well-formed input that violates a contract
  io = 2,          // missing file, unreadable/unparseable bytes
  invariant = 3,   // internal consistency check tripped
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorKind::validation, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what)
      : Error(ErrorKind::invariant, what) {}
};

// Raised by mask_iou when both masks are empty; the overlap ratio is 0/0.
class UndefinedOverlap : public ValidationError {
 public:
  UndefinedOverlap()
      : ValidationError("mask IoU undefined: both masks are empty") {}
};

}  // namespace stagekit
