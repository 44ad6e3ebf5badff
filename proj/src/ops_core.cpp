#include <cmath>
#include <cstring>

#include "gmx/error.hpp"
#include "gmx/ops.hpp"

namespace gmx::ops {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool any_grad(const Tensor& a) { return a.requires_grad(); }
bool any_grad(const Tensor& a, const Tensor& b) {
  return a.requires_grad() || b.requires_grad();
}
bool any_grad(const Tensor& a, const Tensor& b, const Tensor& c) {
  return a.requires_grad() || b.requires_grad() ||
         (c.defined() && c.requires_grad());
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) fail_shape2(op, a.shape(), b.shape());
}

// decompose shape around `axis` into [outer, n, inner]
struct FiberView {
  int64_t outer, n, inner;
};

FiberView fiber_view(const Tensor& x, int axis, const char* op) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    fail_shape(op, "axis out of range", s);
  FiberView v{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    v.inner *= s[i];
  return v;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto& pa = a.data();
  const auto& pb = b.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  if (tape && any_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record(out, [ta, tb, to]() mutable {
      const auto& g = to.grad();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto& pa = a.data();
  const auto& pb = b.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] - pb[i];
  if (tape && any_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record(out, [ta, tb, to]() mutable {
      const auto& g = to.grad();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto& pa = a.data();
  const auto& pb = b.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
  if (tape && any_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record(out, [ta, tb, to]() mutable {
      const auto& g = to.grad();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        const auto& pb2 = tb.data();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        const auto& pa2 = ta.data();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tape, const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& px = x.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] * c;
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, c]() mutable {
      const auto& g = to.grad();
      auto& gx = tx.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
  }
  return out;
}

Tensor add_scalar(Tape* tape, const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& px = x.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] + c;
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to]() mutable {
      const auto& g = to.grad();
      auto& gx = tx.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to]() mutable {
      double g = to.grad()[0];
      auto& gx = tx.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean_all(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(acc * inv);
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, inv]() mutable {
      double g = to.grad()[0] * inv;
      auto& gx = tx.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    fail_shape2("matmul", a.shape(), b.shape());
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor out = Tensor::zeros({M, N});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (int64_t i = 0; i < M; ++i) {
    for (int64_t k = 0; k < K; ++k) {
      double av = pa[i * K + k];
      const double* brow = pb + k * N;
      double* orow = po + i * N;
      for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
  }
  if (tape && any_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record(out, [ta, tb, to, M, K, N]() mutable {
      const double* g = to.grad().data();
      if (ta.requires_grad()) {
        double* ga = ta.grad().data();
        const double* pb2 = tb.data().data();
        for (int64_t i = 0; i < M; ++i)
          for (int64_t k = 0; k < K; ++k) {
            double acc = 0.0;
            const double* grow = g + i * N;
            const double* brow = pb2 + k * N;
            for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
            ga[i * K + k] += acc;
          }
      }
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        const double* pa2 = ta.data().data();
        for (int64_t i = 0; i < M; ++i)
          for (int64_t k = 0; k < K; ++k) {
            double av = pa2[i * K + k];
            const double* grow = g + i * N;
            double* brow = gb + k * N;
            for (int64_t j = 0; j < N; ++j) brow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.ndim() != 2) fail_shape("linear", "weight must be 2-d", w.shape());
  const int64_t Din = w.dim(0), Dout = w.dim(1);
  if (x.ndim() < 1 || x.shape().back() != Din)
    fail_shape2("linear", x.shape(), w.shape());
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != Dout))
    fail_shape2("linear", w.shape(), b.shape());
  const int64_t R = x.numel() / Din;
  Shape out_shape = x.shape();
  out_shape.back() = Dout;
  Tensor out = Tensor::zeros(out_shape);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  double* po = out.data().data();
  if (b.defined()) {
    const double* pb = b.data().data();
    for (int64_t r = 0; r < R; ++r)
      std::memcpy(po + r * Dout, pb, static_cast<size_t>(Dout) * sizeof(double));
  }
  for (int64_t r = 0; r < R; ++r) {
    const double* xrow = px + r * Din;
    double* orow = po + r * Dout;
    for (int64_t k = 0; k < Din; ++k) {
      double xv = xrow[k];
      const double* wrow = pw + k * Dout;
      for (int64_t j = 0; j < Dout; ++j) orow[j] += xv * wrow[j];
    }
  }
  if (tape && any_grad(x, w, b)) {
    out.set_requires_grad(true);
    Tensor tx = x, tw = w, tb = b, to = out;
    tape->record(out, [tx, tw, tb, to, R, Din, Dout]() mutable {
      const double* g = to.grad().data();
      if (tx.requires_grad()) {
        double* gx = tx.grad().data();
        const double* pw2 = tw.data().data();
        for (int64_t r = 0; r < R; ++r) {
          const double* grow = g + r * Dout;
          double* gxrow = gx + r * Din;
          for (int64_t k = 0; k < Din; ++k) {
            double acc = 0.0;
            const double* wrow = pw2 + k * Dout;
            for (int64_t j = 0; j < Dout; ++j) acc += grow[j] * wrow[j];
            gxrow[k] += acc;
          }
        }
      }
      if (tw.requires_grad()) {
        double* gw = tw.grad().data();
        const double* px2 = tx.data().data();
        for (int64_t r = 0; r < R; ++r) {
          const double* grow = g + r * Dout;
          const double* xrow = px2 + r * Din;
          for (int64_t k = 0; k < Din; ++k) {
            double xv = xrow[k];
            double* gwrow = gw + k * Dout;
            for (int64_t j = 0; j < Dout; ++j) gwrow[j] += xv * grow[j];
          }
        }
      }
      if (tb.defined() && tb.requires_grad()) {
        double* gb = tb.grad().data();
        for (int64_t r = 0; r < R; ++r) {
          const double* grow = g + r * Dout;
          for (int64_t j = 0; j < Dout; ++j) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

Tensor softmax(Tape* tape, const Tensor& x, int axis) {
  FiberView v = fiber_view(x, axis, "softmax");
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.n * v.inner + in;
      double mx = px[base];
      for (int64_t t = 1; t < v.n; ++t)
        mx = std::max(mx, px[base + t * v.inner]);
      double denom = 0.0;
      for (int64_t t = 0; t < v.n; ++t) {
        double e = std::exp(px[base + t * v.inner] - mx);
        po[base + t * v.inner] = e;
        denom += e;
      }
      double inv = 1.0 / denom;
      for (int64_t t = 0; t < v.n; ++t) po[base + t * v.inner] *= inv;
    }
  }
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, v]() mutable {
      const double* g = to.grad().data();
      const double* s = to.data().data();
      double* gx = tx.grad().data();
      for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t in = 0; in < v.inner; ++in) {
          const int64_t base = o * v.n * v.inner + in;
          double dot = 0.0;
          for (int64_t t = 0; t < v.n; ++t) {
            int64_t p = base + t * v.inner;
            dot += g[p] * s[p];
          }
          for (int64_t t = 0; t < v.n; ++t) {
            int64_t p = base + t * v.inner;
            gx[p] += s[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, int axis, double eps) {
  FiberView v = fiber_view(x, axis, "layer_norm");
  if (gamma.ndim() != 1 || gamma.dim(0) != v.n)
    fail_shape2("layer_norm", x.shape(), gamma.shape());
  if (beta.ndim() != 1 || beta.dim(0) != v.n)
    fail_shape2("layer_norm", x.shape(), beta.shape());
  Tensor out = Tensor::zeros(x.shape());
  // x_hat and inv_std are needed again in backward; keep them alongside
  auto xhat = std::make_shared<std::vector<double>>(x.data().size());
  auto inv_std = std::make_shared<std::vector<double>>(
      static_cast<size_t>(v.outer * v.inner));
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  double* po = out.data().data();
  double* ph = xhat->data();
  double* ps = inv_std->data();
  const double invn = 1.0 / static_cast<double>(v.n);
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.n * v.inner + in;
      double mean = 0.0;
      for (int64_t t = 0; t < v.n; ++t) mean += px[base + t * v.inner];
      mean *= invn;
      double var = 0.0;
      for (int64_t t = 0; t < v.n; ++t) {
        double d = px[base + t * v.inner] - mean;
        var += d * d;
      }
      var *= invn;
      double is = 1.0 / std::sqrt(var + eps);
      ps[o * v.inner + in] = is;
      for (int64_t t = 0; t < v.n; ++t) {
        int64_t p = base + t * v.inner;
        double h = (px[p] - mean) * is;
        ph[p] = h;
        po[p] = pg[t] * h + pb[t];
      }
    }
  }
  if (tape && any_grad(x, gamma, beta)) {
    out.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, to = out;
    tape->record(out, [tx, tg, tb, to, v, xhat, inv_std]() mutable {
      const double* g = to.grad().data();
      const double* ph2 = xhat->data();
      const double* ps2 = inv_std->data();
      const double* pg2 = tg.data().data();
      const double invn = 1.0 / static_cast<double>(v.n);
      if (tx.requires_grad()) {
        double* gx = tx.grad().data();
        for (int64_t o = 0; o < v.outer; ++o) {
          for (int64_t in = 0; in < v.inner; ++in) {
            const int64_t base = o * v.n * v.inner + in;
            double m1 = 0.0, m2 = 0.0;
            for (int64_t t = 0; t < v.n; ++t) {
              int64_t p = base + t * v.inner;
              double dh = g[p] * pg2[t];
              m1 += dh;
              m2 += dh * ph2[p];
            }
            m1 *= invn;
            m2 *= invn;
            double is = ps2[o * v.inner + in];
            for (int64_t t = 0; t < v.n; ++t) {
              int64_t p = base + t * v.inner;
              double dh = g[p] * pg2[t];
              gx[p] += (dh - m1 - ph2[p] * m2) * is;
            }
          }
        }
      }
      if (tg.requires_grad()) {
        double* gg = tg.grad().data();
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t in = 0; in < v.inner; ++in) {
            const int64_t base = o * v.n * v.inner + in;
            for (int64_t t = 0; t < v.n; ++t) {
              int64_t p = base + t * v.inner;
              gg[t] += g[p] * ph2[p];
            }
          }
      }
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t in = 0; in < v.inner; ++in) {
            const int64_t base = o * v.n * v.inner + in;
            for (int64_t t = 0; t < v.n; ++t) gb[t] += g[base + t * v.inner];
          }
      }
    });
  }
  return out;
}

Tensor hardswish(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& px = x.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) {
    double r = px[i] + 3.0;
    r = r < 0.0 ? 0.0 : (r > 6.0 ? 6.0 : r);
    po[i] = px[i] * r / 6.0;
  }
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to]() mutable {
      const auto& g = to.grad();
      const auto& px2 = tx.data();
      auto& gx = tx.grad();
      for (size_t i = 0; i < g.size(); ++i) {
        double xv = px2[i];
        double d = xv <= -3.0 ? 0.0 : (xv >= 3.0 ? 1.0 : (2.0 * xv + 3.0) / 6.0);
        gx[i] += g[i] * d;
      }
    });
  }
  return out;
}

Tensor gelu(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& px = x.data();
  auto& po = out.data();
  for (size_t i = 0; i < po.size(); ++i) {
    double xv = px[i];
    po[i] = 0.5 * xv * (1.0 + std::erf(xv * kInvSqrt2));
  }
  if (tape && any_grad(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to]() mutable {
      const auto& g = to.grad();
      const auto& px2 = tx.data();
      auto& gx = tx.grad();
      for (size_t i = 0; i < g.size(); ++i) {
        double xv = px2[i];
        double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
        gx[i] += g[i] * (cdf + xv * pdf);
      }
    });
  }
  return out;
}

}  // namespace gmx::ops
