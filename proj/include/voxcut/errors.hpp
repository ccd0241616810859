#pragma once

#include <stdexcept>
#include <string>

namespace voxcut {

// Invalid user-facing configuration: bad flags, malformed config files,
// unsatisfiable scene constraints. CLI exit code 2.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A computation produced non-finite values or an internally inconsistent
// numeric state. CLI exit code 3.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable, unwritable or malformed files. CLI exit code 4.
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace voxcut
