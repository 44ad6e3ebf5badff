#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gmx/tape.hpp"
#include "gmx/tensor.hpp"

namespace gmx {

struct GradCheckResult {
  bool pass = true;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  std::string worst_name;
  std::string note;
};

// Central differences: fd_i = (f(x + h e_i) - f(x - h e_i)) / 2h, compared
// per element against the tape gradient. An element passes when
// |analytic - fd| <= atol + rtol * max(|analytic|, |fd|). f must be a
// deterministic scalar-valued function; a double forward evaluation guards
// against nondeterminism.
GradCheckResult grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                           const Tensor& x0, double h = 1e-5,
                           double rtol = 1e-3, double atol = 1e-8);

// Same check for selected parameter scalars. `f` evaluates the loss from
// the current values of whatever parameters it captured; each probe names
// one scalar to perturb.
struct ParamProbe {
  Tensor tensor;
  int64_t index = 0;
  std::string name;
};

GradCheckResult grad_check_params(const std::function<Tensor(Tape&)>& f,
                                  const std::vector<ParamProbe>& probes,
                                  double h = 1e-5, double rtol = 1e-3,
                                  double atol = 1e-8);

}  // namespace gmx
