#include "gmx/error.hpp"

#include <sstream>

namespace gmx {

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

void fail_shape(const std::string& op, const std::string& what,
                const std::vector<int64_t>& got) {
  throw ShapeError(op + ": " + what + ", got " + shape_str(got));
}

void fail_shape2(const std::string& op, const std::vector<int64_t>& a,
                 const std::vector<int64_t>& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

}  // namespace gmx
