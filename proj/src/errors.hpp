#pragma once

#include <stdexcept>
#include <string>

namespace krct {

enum class ErrorCode {
  invalid_argument = 1,
  parse = 2,
  io = 3,
  numerical = 4,
  nonconvergence = 5,
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
public:
  explicit InvalidArgument(const std::string& msg) : Error(ErrorCode::invalid_argument, msg) {}
};

class ParseError : public Error {
public:
  explicit ParseError(const std::string& msg) : Error(ErrorCode::parse, msg) {}
};

class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(ErrorCode::io, msg) {}
};

class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& msg) : Error(ErrorCode::numerical, msg) {}
};

}  // namespace krct
