#pragma once

#include <stdexcept>

namespace epng {

// Error families map to distinct CLI exit codes.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct mismatch_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace epng
