#pragma once

#include <stdexcept>
#include <string>

namespace textrefiner {

// Invalid configuration values (bad hyperparameters, infeasible specs,
// malformed flag combinations). CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem problems: missing files, unwritable paths, short reads.
// CLI maps this to exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Shape disagreements between operands.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Corrupt or incompatible checkpoint / bundle files. Carries a kind so
// callers can tell a truncated file from a version or shape mismatch.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, ShapeMismatch, BadManifest, InvariantViolation };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Non-finite values where the contract requires finite ones (exploding
// loss, NaN gradients). CLI maps this to exit code 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Writing into a frozen cache.
class FrozenWriteError : public std::runtime_error {
 public:
  explicit FrozenWriteError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace textrefiner
