#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "gmx/error.hpp"
#include "gmx/grad_check.hpp"
#include "gmx/ops.hpp"
#include "gmx/tensor.hpp"

using namespace gmx;
namespace op = gmx::ops;

namespace {

// weighted-sum loss exposes every output element with a distinct weight;
// a plain sum would hide gradient errors that cancel across elements
// (softmax and layer_norm outputs sum to a constant).
Tensor weighted(Tape& tape, const Tensor& y, const Tensor& w) {
  return op::sum(&tape, op::mul(&tape, y, w));
}

Tensor rand_t(Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return Tensor::rand_uniform(std::move(s), rng, lo, hi);
}

void expect_pass(const GradCheckResult& r) {
  INFO("max_rel_err=", r.max_rel_err, " worst=", r.worst_name, "[",
       r.worst_index, "] note=", r.note);
  CHECK(r.pass);
}

}  // namespace

TEST_CASE("grad: elementwise chain") {
  Tensor w = rand_t({3, 4}, 101);
  auto f = [&](Tape& t, const Tensor& x) {
    Tensor a = op::add(&t, x, op::scale(&t, x, 0.5));
    Tensor b = op::mul(&t, a, x);
    Tensor c = op::sub(&t, b, op::add_scalar(&t, x, -0.25));
    return weighted(t, c, w);
  };
  expect_pass(grad_check(f, rand_t({3, 4}, 102)));
}

TEST_CASE("grad: mean_all and sum") {
  auto f = [](Tape& t, const Tensor& x) { return op::mean_all(&t, x); };
  expect_pass(grad_check(f, rand_t({2, 5}, 103)));
}

TEST_CASE("grad: matmul both sides") {
  Tensor b0 = rand_t({4, 3}, 104);
  Tensor w = rand_t({2, 3}, 105);
  auto fa = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::matmul(&t, x, b0), w);
  };
  expect_pass(grad_check(fa, rand_t({2, 4}, 106)));

  Tensor a0 = rand_t({2, 4}, 107);
  auto fb = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::matmul(&t, a0, x), w);
  };
  expect_pass(grad_check(fb, rand_t({4, 3}, 108)));
}

TEST_CASE("grad: linear x, w, b") {
  Tensor w0 = rand_t({4, 3}, 109);
  Tensor b0 = rand_t({3}, 110);
  Tensor mask = rand_t({2, 2, 3}, 111);
  auto fx = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::linear(&t, x, w0, b0), mask);
  };
  expect_pass(grad_check(fx, rand_t({2, 2, 4}, 112)));

  Tensor x0 = rand_t({2, 2, 4}, 113);
  auto fw = [&](Tape& t, const Tensor& w) {
    return weighted(t, op::linear(&t, x0, w, b0), mask);
  };
  expect_pass(grad_check(fw, rand_t({4, 3}, 114)));

  auto fb = [&](Tape& t, const Tensor& b) {
    return weighted(t, op::linear(&t, x0, w0, b), mask);
  };
  expect_pass(grad_check(fb, rand_t({3}, 115)));
}

TEST_CASE("grad: softmax") {
  Tensor w = rand_t({2, 5}, 116);
  auto f = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::softmax(&t, x, 1), w);
  };
  expect_pass(grad_check(f, rand_t({2, 5}, 117, -2.0, 2.0)));

  Tensor w4 = rand_t({2, 3, 2, 2}, 118);
  auto f4 = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::softmax(&t, x, 1), w4);
  };
  expect_pass(grad_check(f4, rand_t({2, 3, 2, 2}, 119, -2.0, 2.0)));
}

TEST_CASE("grad: layer_norm x, gamma, beta") {
  Tensor g0 = rand_t({5}, 120, 0.5, 1.5);
  Tensor b0 = rand_t({5}, 121);
  Tensor w = rand_t({3, 5}, 122);
  auto fx = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::layer_norm(&t, x, g0, b0, 1), w);
  };
  expect_pass(grad_check(fx, rand_t({3, 5}, 123, -2.0, 2.0), 1e-5, 1e-3, 1e-8));

  Tensor x0 = rand_t({3, 5}, 124, -2.0, 2.0);
  Tensor gp = g0.detach_copy();
  Tensor bp = b0.detach_copy();
  gp.set_requires_grad(true);
  bp.set_requires_grad(true);
  auto floss = [&](Tape& t) {
    return weighted(t, op::layer_norm(&t, x0, gp, bp, 1), w);
  };
  std::vector<ParamProbe> probes;
  for (int64_t i = 0; i < 5; ++i) probes.push_back({gp, i, "gamma"});
  for (int64_t i = 0; i < 5; ++i) probes.push_back({bp, i, "beta"});
  expect_pass(grad_check_params(floss, probes));
}

TEST_CASE("grad: layer_norm over channel axis of 4d") {
  Tensor g0 = rand_t({3}, 125, 0.5, 1.5);
  Tensor b0 = rand_t({3}, 126);
  Tensor w = rand_t({2, 3, 2, 2}, 127);
  auto f = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::layer_norm(&t, x, g0, b0, 1), w);
  };
  expect_pass(grad_check(f, rand_t({2, 3, 2, 2}, 128, -2.0, 2.0)));
}

TEST_CASE("grad: hardswish away from kinks") {
  Tensor x0 = Tensor::from_data(
      {2, 4}, {-2.8, -1.5, -0.4, 0.3, 1.2, 2.7, -3.6, 3.8});
  Tensor w = rand_t({2, 4}, 129);
  auto f = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::hardswish(&t, x), w);
  };
  expect_pass(grad_check(f, x0));
}

TEST_CASE("grad: gelu") {
  Tensor w = rand_t({3, 3}, 130);
  auto f = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::gelu(&t, x), w);
  };
  expect_pass(grad_check(f, rand_t({3, 3}, 131, -2.5, 2.5)));
}

TEST_CASE("grad: depthwise conv x, k, b") {
  Tensor k0 = rand_t({3, 3, 3}, 132);
  Tensor bi0 = rand_t({3}, 133);
  Tensor w = rand_t({2, 3, 4, 4}, 134);
  auto fx = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::conv2d_depthwise(&t, x, k0, bi0), w);
  };
  expect_pass(grad_check(fx, rand_t({2, 3, 4, 4}, 135)));

  Tensor x0 = rand_t({2, 3, 4, 4}, 136);
  auto fk = [&](Tape& t, const Tensor& k) {
    return weighted(t, op::conv2d_depthwise(&t, x0, k, bi0), w);
  };
  expect_pass(grad_check(fk, rand_t({3, 3, 3}, 137)));

  auto fb = [&](Tape& t, const Tensor& b) {
    return weighted(t, op::conv2d_depthwise(&t, x0, k0, b), w);
  };
  expect_pass(grad_check(fb, rand_t({3}, 138)));
}

TEST_CASE("grad: depthwise conv k=5") {
  Tensor k0 = rand_t({2, 5, 5}, 139);
  Tensor w = rand_t({1, 2, 6, 5}, 140);
  auto fx = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::conv2d_depthwise(&t, x, k0, Tensor()), w);
  };
  expect_pass(grad_check(fx, rand_t({1, 2, 6, 5}, 141)));
}

TEST_CASE("grad: strided depthwise conv") {
  Tensor k0 = rand_t({2, 3, 3}, 142);
  Tensor w = rand_t({1, 2, 3, 2}, 143);
  auto fx = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::conv2d_depthwise_strided2(&t, x, k0, Tensor()), w);
  };
  expect_pass(grad_check(fx, rand_t({1, 2, 5, 4}, 144)));

  Tensor x0 = rand_t({1, 2, 5, 4}, 145);
  auto fk = [&](Tape& t, const Tensor& k) {
    return weighted(t, op::conv2d_depthwise_strided2(&t, x0, k, Tensor()), w);
  };
  expect_pass(grad_check(fk, rand_t({2, 3, 3}, 146)));
}

TEST_CASE("grad: pointwise conv") {
  Tensor w0 = rand_t({4, 3}, 147);
  Tensor b0 = rand_t({4}, 148);
  Tensor w = rand_t({2, 4, 3, 3}, 149);
  auto fx = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::conv2d_pointwise(&t, x, w0, b0), w);
  };
  expect_pass(grad_check(fx, rand_t({2, 3, 3, 3}, 150)));

  Tensor x0 = rand_t({2, 3, 3, 3}, 151);
  auto fw = [&](Tape& t, const Tensor& ww) {
    return weighted(t, op::conv2d_pointwise(&t, x0, ww, b0), w);
  };
  expect_pass(grad_check(fw, rand_t({4, 3}, 152)));

  auto fb = [&](Tape& t, const Tensor& b) {
    return weighted(t, op::conv2d_pointwise(&t, x0, w0, b), w);
  };
  expect_pass(grad_check(fb, rand_t({4}, 153)));
}

TEST_CASE("grad: dense strided conv") {
  for (int stride : {1, 2}) {
    Tensor w0 = rand_t({2, 3, 3, 3}, 154);
    Tensor b0 = rand_t({2}, 155);
    const int64_t Ho = stride == 1 ? 4 : 2;
    Tensor w = rand_t({1, 2, Ho, Ho}, 156);
    auto fx = [&](Tape& t, const Tensor& x) {
      return weighted(t, op::conv2d_strided(&t, x, w0, b0, stride), w);
    };
    expect_pass(grad_check(fx, rand_t({1, 3, 4, 4}, 157)));

    Tensor x0 = rand_t({1, 3, 4, 4}, 158);
    auto fw = [&](Tape& t, const Tensor& ww) {
      return weighted(t, op::conv2d_strided(&t, x0, ww, b0, stride), w);
    };
    expect_pass(grad_check(fw, rand_t({2, 3, 3, 3}, 159)));
  }
}

TEST_CASE("grad: pools") {
  // fixed inputs with well-separated values keep min/max selections stable
  // under the finite-difference probe
  std::vector<double> vals;
  for (int i = 0; i < 2 * 2 * 4 * 4; ++i)
    vals.push_back(std::sin(3.7 * i + 0.31) * 5.0 + 0.01 * i);
  Tensor x0 = Tensor::from_data({2, 2, 4, 4}, vals);
  Tensor w = rand_t({2, 2, 4, 4}, 160);
  for (auto kind : {op::PoolKind::min, op::PoolKind::max, op::PoolKind::avg}) {
    auto f = [&](Tape& t, const Tensor& x) {
      return weighted(t, op::pool2d(&t, x, kind, 3), w);
    };
    expect_pass(grad_check(f, x0));
  }
}

TEST_CASE("grad: global pools and mean_tokens") {
  Tensor wg = rand_t({2, 3}, 161);
  auto fg = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::global_avg_pool(&t, x), wg);
  };
  expect_pass(grad_check(fg, rand_t({2, 3, 2, 2}, 162)));

  auto fm = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::mean_tokens(&t, x), wg);
  };
  expect_pass(grad_check(fm, rand_t({2, 4, 3}, 163)));
}

TEST_CASE("grad: cross entropy") {
  std::vector<int> labels{2, 0, 1};
  auto f = [&](Tape& t, const Tensor& x) {
    return op::cross_entropy(&t, x, labels);
  };
  expect_pass(grad_check(f, rand_t({3, 4}, 164, -2.0, 2.0)));
}

TEST_CASE("grad: layout ops route gradients exactly") {
  Tensor w = rand_t({2, 4, 2, 3}, 165);
  auto f = [&](Tape& t, const Tensor& x) {
    Tensor sp = op::tokens_to_spatial(&t, x, 2, 3);
    return weighted(t, sp, w);
  };
  expect_pass(grad_check(f, rand_t({2, 6, 4}, 166)));

  Tensor w2 = rand_t({6, 2, 2, 2}, 167);
  auto f2 = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::qkv_stack(&t, x, 2, 2), w2);
  };
  expect_pass(grad_check(f2, rand_t({2, 4, 6}, 168)));

  Tensor w3 = rand_t({1, 2, 2, 2}, 169);
  auto f3 = [&](Tape& t, const Tensor& x) {
    Tensor rg = op::qkv_regroup(&t, x);
    return weighted(t, op::mean_channel_groups(&t, rg), w3);
  };
  expect_pass(grad_check(f3, rand_t({3, 2, 2, 2}, 170)));

  Tensor w4 = rand_t({2, 6, 2, 2}, 171);
  auto f4 = [&](Tape& t, const Tensor& x) {
    Tensor a = op::slice_channels(&t, x, 0, 2);
    Tensor b = op::slice_channels(&t, x, 2, 6);
    Tensor cat = op::concat_channels(&t, {b, a});
    return weighted(t, cat, w4);
  };
  expect_pass(grad_check(f4, rand_t({2, 6, 2, 2}, 172)));

  Tensor w5 = rand_t({2, 2, 6, 2}, 173);
  auto f5 = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::spatial_to_heads(&t, x, 2), w5);
  };
  expect_pass(grad_check(f5, rand_t({2, 4, 2, 3}, 174)));
}

TEST_CASE("grad: factorized attention q, k, v") {
  const double scale = 1.0 / std::sqrt(3.0);
  Tensor w = rand_t({2, 2, 4, 3}, 175);
  Tensor q0 = rand_t({2, 2, 4, 3}, 176);
  Tensor k0 = rand_t({2, 2, 4, 3}, 177);
  Tensor v0 = rand_t({2, 2, 4, 3}, 178);

  auto fq = [&](Tape& t, const Tensor& q) {
    return weighted(t, op::factorized_attention(&t, q, k0, v0, scale), w);
  };
  expect_pass(grad_check(fq, q0));

  auto fk = [&](Tape& t, const Tensor& k) {
    return weighted(t, op::factorized_attention(&t, q0, k, v0, scale), w);
  };
  expect_pass(grad_check(fk, k0));

  auto fv = [&](Tape& t, const Tensor& v) {
    return weighted(t, op::factorized_attention(&t, q0, k0, v, scale), w);
  };
  expect_pass(grad_check(fv, v0));
}

TEST_CASE("grad: factorized attention context-softmax mode") {
  const double scale = 0.5;
  Tensor w = rand_t({1, 2, 3, 3}, 179);
  Tensor q0 = rand_t({1, 2, 3, 3}, 180);
  Tensor k0 = rand_t({1, 2, 3, 3}, 181);
  Tensor v0 = rand_t({1, 2, 3, 3}, 182);
  auto all = [&](Tape& t, const Tensor& x) {
    Tensor q = op::slice_batch(&t, x, 0, 1);
    Tensor k = op::slice_batch(&t, x, 1, 2);
    Tensor v = op::slice_batch(&t, x, 2, 3);
    return weighted(t, op::factorized_attention(&t, q, k, v, scale, true), w);
  };
  std::vector<double> packed;
  for (const Tensor* t : {&q0, &k0, &v0})
    packed.insert(packed.end(), t->data().begin(), t->data().end());
  expect_pass(grad_check(all, Tensor::from_data({3, 2, 3, 3}, packed)));
}

TEST_CASE("grad: vanilla attention q, k, v") {
  const double scale = 1.0 / std::sqrt(3.0);
  Tensor w = rand_t({1, 2, 4, 3}, 183);
  Tensor q0 = rand_t({1, 2, 4, 3}, 184);
  Tensor k0 = rand_t({1, 2, 4, 3}, 185);
  Tensor v0 = rand_t({1, 2, 4, 3}, 186);
  auto fq = [&](Tape& t, const Tensor& q) {
    return weighted(t, op::vanilla_attention(&t, q, k0, v0, scale), w);
  };
  expect_pass(grad_check(fq, q0));
  auto fk = [&](Tape& t, const Tensor& k) {
    return weighted(t, op::vanilla_attention(&t, q0, k, v0, scale), w);
  };
  expect_pass(grad_check(fk, k0));
  auto fv = [&](Tape& t, const Tensor& v) {
    return weighted(t, op::vanilla_attention(&t, q0, k0, v, scale), w);
  };
  expect_pass(grad_check(fv, v0));
}

TEST_CASE("grad: drop_path eval and keep-all paths") {
  Tensor r0 = rand_t({2, 3}, 187);
  Tensor w = rand_t({2, 3}, 188);
  auto f = [&](Tape& t, const Tensor& x) {
    return weighted(t, op::drop_path(&t, x, r0, 0.3, false, nullptr), w);
  };
  expect_pass(grad_check(f, rand_t({2, 3}, 189)));

  auto fr = [&](Tape& t, const Tensor& r) {
    return weighted(t, op::drop_path(&t, rand_t({2, 3}, 190), r, 0.0, true,
                                     nullptr),
                    w);
  };
  expect_pass(grad_check(fr, r0));
}

TEST_CASE("grad: training-mode drop_path scales surviving residuals") {
  Tensor x = Tensor::full({8, 2}, 0.0, true);
  Tensor r = Tensor::full({8, 2}, 1.0, true);
  Rng rng(4242);
  Tape tape;
  Tensor y = op::drop_path(&tape, x, r, 0.5, true, &rng);
  Tensor loss = op::sum(&tape, y);
  tape.backward(loss);
  for (int b = 0; b < 8; ++b) {
    const double out = y.data()[b * 2];
    const double g = r.grad()[b * 2];
    if (out == 0.0)
      CHECK(g == 0.0);
    else
      CHECK(g == doctest::Approx(2.0));
    CHECK(x.grad()[b * 2] == doctest::Approx(1.0));
  }
}

TEST_CASE("negative control: corrupted backward is caught") {
  // forward y = 2x with a deliberately wrong adjoint (sign flipped)
  auto f = [](Tape& t, const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y.data()[i] = 2.0 * x.data()[i];
    y.set_requires_grad(true);
    Tensor xc = x;
    Tensor yc = y;
    t.record(y, [xc, yc]() mutable {
      for (int64_t i = 0; i < xc.numel(); ++i)
        xc.grad()[i] += -2.0 * yc.grad()[i];
    });
    return op::sum(&t, y);
  };
  GradCheckResult r = grad_check(f, rand_t({3}, 191));
  CHECK(!r.pass);
  CHECK(r.max_rel_err > 0.5);
}

TEST_CASE("nondeterministic forward is detected") {
  int calls = 0;
  auto f = [&calls](Tape& t, const Tensor& x) {
    Tensor y = op::scale(&t, x, 1.0 + 0.001 * calls);
    ++calls;
    return op::sum(&t, y);
  };
  GradCheckResult r = grad_check(f, rand_t({2}, 192));
  CHECK(!r.pass);
  CHECK(r.note == "nondeterministic forward");
}

TEST_CASE("backward accumulates exactly once per call") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor a = op::scale(&tape, x, 3.0);
  Tensor b = op::mul(&tape, a, x);  // b = 3x^2, db/dx = 6x
  Tensor loss = op::sum(&tape, b);
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(12.0));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  CHECK(x.grad()[1] == doctest::Approx(24.0));
}

TEST_CASE("fan-out accumulates both branch contributions") {
  Tensor x = Tensor::from_data({2}, {0.5, -1.5}, true);
  Tape tape;
  Tensor a = op::scale(&tape, x, 2.0);
  Tensor s = op::add(&tape, a, x);  // 3x
  Tensor loss = op::sum(&tape, op::mul(&tape, s, s));  // 9x^2 per element
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(18.0 * 0.5));
  CHECK(x.grad()[1] == doctest::Approx(18.0 * -1.5));
}

TEST_CASE("tape contract errors") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y = op::scale(&tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);

  Tensor z = Tensor::scalar(1.0);
  Tape t2;
  CHECK_THROWS_AS(t2.backward(z), ContractError);
}

TEST_CASE("no-tape evaluation records nothing and needs no grad") {
  Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor y = op::softmax(nullptr, op::gelu(nullptr, x), 1);
  CHECK(!y.requires_grad());
  Tape tape;
  Tensor x2 = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor y2 = op::gelu(&tape, x2);
  CHECK(tape.size() == 0);
  CHECK(!y2.requires_grad());
}

TEST_CASE("autodiff linearity: grad(a*f + b*g) == a*grad(f) + b*grad(g)") {
  Rng rng(31, 2);
  Tensor x0 = Tensor::rand_uniform({3, 4}, rng, -1.5, 1.5);
  const double a = 1.7, b = -0.6;

  auto f = [](Tape& t, const Tensor& x) {
    return op::sum(&t, op::gelu(&t, x));
  };
  auto g = [](Tape& t, const Tensor& x) {
    return op::mean_all(&t, op::mul(&t, x, x));
  };

  auto grad_of = [&](const std::function<Tensor(Tape&, const Tensor&)>& fn) {
    Tensor x = x0.detach_copy();
    x.set_requires_grad(true);
    Tape t;
    t.backward(fn(t, x));
    return x.grad();
  };

  std::vector<double> gf = grad_of(f);
  std::vector<double> gg = grad_of(g);
  std::vector<double> gc = grad_of([&](Tape& t, const Tensor& x) {
    return op::add(&t, op::scale(&t, f(t, x), a), op::scale(&t, g(t, x), b));
  });
  for (size_t i = 0; i < gc.size(); ++i)
    CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
}
