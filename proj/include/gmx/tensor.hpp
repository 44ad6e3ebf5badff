#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "gmx/rng.hpp"

namespace gmx {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);

// Dense f64 tensor with value-semantics handle (shared storage). Ops never
// mutate their inputs; the only post-creation writes are gradient
// accumulation during backward and explicit parameter updates by the
// optimizer (which must happen outside any live tape).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0,
                             double hi = 1.0, bool requires_grad = false);
  static Tensor rand_normal(Shape shape, Rng& rng, double mean, double stddev,
                            bool requires_grad = false);
  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev,
                             bool requires_grad = false);

  // Xavier/Glorot stddev sqrt(2 / (fan_in + fan_out)) for a weight shape:
  // [Din,Dout] or [Cout,Cin] use the two dims, depthwise [C,kh,kw] uses the
  // window taps for both fans, dense conv [Cout,Cin,kh,kw] folds the taps
  // into each fan.
  static double xavier_std(const Shape& shape);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int64_t dim(int i) const;
  int64_t numel() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  std::vector<double>& data();
  const std::vector<double>& data() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;
  Tensor detach_copy() const;

  // stable identity for graph bookkeeping
  const void* id() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& ref();
  const Impl& ref() const;
};

}  // namespace gmx
