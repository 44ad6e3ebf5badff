#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmx {

// Error taxonomy. The CLI maps these onto its exit codes:
// ConfigError -> 2, IoError -> 3, NumericError -> 4.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_str(const std::vector<int64_t>& s);

[[noreturn]] void fail_shape(const std::string& op, const std::string& what,
                             const std::vector<int64_t>& got);
[[noreturn]] void fail_shape2(const std::string& op, const std::vector<int64_t>& a,
                              const std::vector<int64_t>& b);

}  // namespace gmx
