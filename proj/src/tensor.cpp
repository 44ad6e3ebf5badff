#include "gmx/tensor.hpp"

#include <cmath>

#include "gmx/error.hpp"

namespace gmx {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) fail_shape("tensor", "negative dimension", s);
    n *= d;
  }
  return n;
}

Tensor::Impl& Tensor::ref() {
  if (!impl_) throw ContractError("tensor: use of undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::ref() const {
  if (!impl_) throw ContractError("tensor: use of undefined tensor");
  return *impl_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), 0.0);
  Tensor t(std::move(impl));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size()))
    fail_shape("from_data", "data size does not match shape", shape);
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tensor t(std::move(impl));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::rand_normal(Shape shape, Rng& rng, double mean, double stddev,
                           bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = mean + stddev * rng.normal();
  return t;
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev,
                            bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.trunc_normal(stddev);
  return t;
}

double Tensor::xavier_std(const Shape& shape) {
  double fan_in = 1.0, fan_out = 1.0;
  switch (shape.size()) {
    case 2:
      fan_in = static_cast<double>(shape[0]);
      fan_out = static_cast<double>(shape[1]);
      break;
    case 3: {
      const double taps = static_cast<double>(shape[1] * shape[2]);
      fan_in = taps;
      fan_out = taps;
      break;
    }
    case 4: {
      const double taps = static_cast<double>(shape[2] * shape[3]);
      fan_in = static_cast<double>(shape[1]) * taps;
      fan_out = static_cast<double>(shape[0]) * taps;
      break;
    }
    default:
      fail_shape("xavier_std", "weight shape must be 2-4 dimensional", shape);
  }
  return std::sqrt(2.0 / (fan_in + fan_out));
}

const Shape& Tensor::shape() const { return ref().shape; }
int Tensor::ndim() const { return static_cast<int>(ref().shape.size()); }

int64_t Tensor::dim(int i) const {
  const Shape& s = ref().shape;
  if (i < 0 || i >= static_cast<int>(s.size()))
    throw ContractError("tensor: dim index out of range");
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(ref().data.size());
}

bool Tensor::requires_grad() const { return ref().requires_grad; }

void Tensor::set_requires_grad(bool v) {
  Impl& im = ref();
  im.requires_grad = v;
  if (v) {
    im.grad.assign(im.data.size(), 0.0);
  } else {
    im.grad.clear();
  }
}

std::vector<double>& Tensor::data() { return ref().data; }
const std::vector<double>& Tensor::data() const { return ref().data; }

std::vector<double>& Tensor::grad() {
  Impl& im = ref();
  if (!im.requires_grad)
    throw ContractError("tensor: grad requested but requires_grad is false");
  return im.grad;
}

const std::vector<double>& Tensor::grad() const {
  const Impl& im = ref();
  if (!im.requires_grad)
    throw ContractError("tensor: grad requested but requires_grad is false");
  return im.grad;
}

void Tensor::zero_grad() {
  Impl& im = ref();
  if (im.requires_grad) im.grad.assign(im.data.size(), 0.0);
}

double Tensor::item() const {
  const Impl& im = ref();
  if (im.data.size() != 1) fail_shape("item", "expected scalar", im.shape);
  return im.data[0];
}

Tensor Tensor::detach_copy() const {
  const Impl& im = ref();
  return from_data(im.shape, im.data, false);
}

}  // namespace gmx
