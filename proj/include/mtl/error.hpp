#pragma once

#include <stdexcept>
#include <string>

namespace mtl {

// Exit codes surfaced by the CLI; see Error::exit_code().
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kMissing = 2,
  kParse = 3,
  kContract = 4,
  kDiverged = 5,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const noexcept { return ExitCode::kContract; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

class EmptySelectionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, std::size_t epoch, std::size_t batch)
      : Error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kDiverged; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

class MissingInputError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kMissing; }
};

class ParseError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kParse; }
};

}  // namespace mtl
