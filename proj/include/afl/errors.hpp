#pragma once

#include <stdexcept>
#include <string>

namespace afl {

// Error categories map to CLI exit codes (see tools/afl.cpp):
// ConfigError/DomainError -> 2, InvariantError -> 3,
// MemoryGuardError/CapExceededError -> 4.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MemoryGuardError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Degree/table budgets in the Hermite algebra.
struct CapExceededError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace afl
