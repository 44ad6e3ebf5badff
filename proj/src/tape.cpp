#include "gmx/tape.hpp"

#include <algorithm>

#include "gmx/error.hpp"

namespace gmx {

void Tape::record(Tensor output, std::function<void()> backward_fn) {
  nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    fail_shape("backward", "loss must be scalar", loss.shape());
  if (!loss.requires_grad())
    throw ContractError(
        "backward: loss does not require grad (nothing on the tape leads to "
        "it)");
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->fn();
    auto& g = it->output.grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

}  // namespace gmx
