#include "gmx/grad_check.hpp"

#include <cmath>

#include "gmx/error.hpp"

namespace gmx {

namespace {

void consider(GradCheckResult& r, double analytic, double fd, double rtol,
              double atol, int64_t index, const std::string& name) {
  const double err = std::abs(analytic - fd);
  const double denom = std::max(std::abs(analytic), std::abs(fd));
  const double rel = err / (denom + atol);
  if (rel > r.max_rel_err) {
    r.max_rel_err = rel;
    r.worst_index = index;
    r.worst_name = name;
  }
  if (err > atol + rtol * denom) r.pass = false;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                           const Tensor& x0, double h, double rtol,
                           double atol) {
  GradCheckResult result;

  Tensor x = x0.detach_copy();
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = f(tape, x);
  if (loss.numel() != 1)
    throw ContractError("grad_check: function must return a scalar");
  const double l0 = loss.item();

  {
    Tape replay;
    Tensor again = f(replay, x);
    if (again.item() != l0) {
      result.pass = false;
      result.note = "nondeterministic forward";
      return result;
    }
  }

  tape.backward(loss);
  std::vector<double> analytic = x.grad();

  Tensor xp = x0.detach_copy();
  for (int64_t i = 0; i < xp.numel(); ++i) {
    const double saved = xp.data()[i];
    xp.data()[i] = saved + h;
    Tape tp;
    const double lp = f(tp, xp).item();
    xp.data()[i] = saved - h;
    Tape tm;
    const double lm = f(tm, xp).item();
    xp.data()[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    consider(result, analytic[i], fd, rtol, atol, i, "x");
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<Tensor(Tape&)>& f,
                                  const std::vector<ParamProbe>& probes,
                                  double h, double rtol, double atol) {
  GradCheckResult result;

  for (const ParamProbe& p : probes) {
    if (!p.tensor.requires_grad())
      throw ContractError("grad_check_params: probe '" + p.name +
                          "' does not require grad");
    if (p.index < 0 || p.index >= p.tensor.numel())
      throw ContractError("grad_check_params: probe index out of range for '" +
                          p.name + "'");
    Tensor t = p.tensor;
    t.zero_grad();
  }

  Tape tape;
  Tensor loss = f(tape);
  if (loss.numel() != 1)
    throw ContractError("grad_check_params: function must return a scalar");
  const double l0 = loss.item();
  {
    Tape replay;
    if (f(replay).item() != l0) {
      result.pass = false;
      result.note = "nondeterministic forward";
      return result;
    }
  }
  tape.backward(loss);

  std::vector<double> analytic;
  analytic.reserve(probes.size());
  for (const ParamProbe& p : probes) analytic.push_back(p.tensor.grad()[p.index]);

  for (size_t i = 0; i < probes.size(); ++i) {
    const ParamProbe& p = probes[i];
    Tensor t = p.tensor;
    double& slot = t.data()[p.index];
    const double saved = slot;
    slot = saved + h;
    Tape tp;
    const double lp = f(tp).item();
    slot = saved - h;
    Tape tm;
    const double lm = f(tm).item();
    slot = saved;
    const double fd = (lp - lm) / (2.0 * h);
    consider(result, analytic[i], fd, rtol, atol, p.index, p.name);
  }
  return result;
}

}  // namespace gmx
