#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmx/tensor.hpp"

namespace gmx {

// Ordered registry of named trainable tensors. Registration order is the
// canonical order for optimizer state and weight archives.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  // Registers `t`, marks it trainable and returns it. Duplicate names throw.
  Tensor add(const std::string& name, Tensor t);

  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  const Tensor* find(const std::string& name) const;
  int64_t total_params() const;
  void zero_grad() const;

 private:
  std::vector<Entry> entries_;
};

}  // namespace gmx
