#pragma once

#include <functional>
#include <vector>

#include "gmx/tensor.hpp"

namespace gmx {

// Reverse-mode tape. Ops append one node per call; backward() seeds
// d(loss)/d(loss) = 1 and walks the nodes once in reverse. After a node
// propagates, its output's grad buffer is cleared, so only leaves (inputs
// and parameters) accumulate; repeated backward calls therefore add exactly
// one more gradient contribution each. A tape owns shared handles to every
// tensor its closures captured, so activations stay alive until clear().
// Tapes are not thread-safe; run independent tapes on disjoint parameter
// stores if you want concurrency.
class Tape {
 public:
  // `output` is the tensor the node produced; its grad is consumed by
  // backward_fn and cleared afterwards.
  void record(Tensor output, std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor output;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

}  // namespace gmx
