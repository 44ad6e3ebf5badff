#include "gmx/param_store.hpp"

#include "gmx/error.hpp"

namespace gmx {

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (find(name) != nullptr)
    throw ContractError("param store: duplicate name '" + name + "'");
  t.set_requires_grad(true);
  entries_.push_back({name, t});
  return t;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const Entry& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() const {
  for (const Entry& e : entries_) {
    Tensor t = e.tensor;
    t.zero_grad();
  }
}

}  // namespace gmx
