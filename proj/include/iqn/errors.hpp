#pragma once

#include <stdexcept>
#include <string>

namespace iqn {

// Bad arguments: dimension mismatches, empty batches, out-of-range indices.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Calling an operation in a state where it is not allowed
// (stepping a terminal state, sampling an empty buffer).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Ill-posed models: non-stochastic transition rows, diverging LQR iteration.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Experiment configuration problems. `category` distinguishes missing files,
// syntax errors, unknown keys and invariant violations.
class ConfigError : public std::runtime_error {
 public:
  enum class Category { kMissingFile, kSyntax, kUnknownKey, kInvariant };

  ConfigError(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

}  // namespace iqn
