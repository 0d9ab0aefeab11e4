#pragma once

#include <stdexcept>
#include <string>

namespace cot {

// Violated precondition (bad shape, bad argument, bad state). CLI maps to exit 1.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Raised when adaptation code touches target-domain labels.
class LabelAccessError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Filesystem / format failures. CLI maps to exit 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string last_checkpoint)
      : std::runtime_error(what), last_checkpoint_(std::move(last_checkpoint)) {}

  const std::string& last_checkpoint() const noexcept { return last_checkpoint_; }

 private:
  std::string last_checkpoint_;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace cot
