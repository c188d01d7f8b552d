#pragma once

#include <stdexcept>
#include <string>

namespace madkin {

/// Bad configuration or call contract (CLI exit code 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A module refused its input on numerical grounds (CLI exit code 3).
struct NumericalRejection : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace madkin
