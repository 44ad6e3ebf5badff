#include <algorithm>
#include <cmath>
#include <memory>

#include "gmx/error.hpp"
#include "gmx/ops.hpp"

namespace gmx::ops {

namespace {

bool any_grad3(const Tensor& a, const Tensor& b, const Tensor& c) {
  return a.requires_grad() || b.requires_grad() ||
         (c.defined() && c.requires_grad());
}

void check_nchw(const char* op, const Tensor& x) {
  if (x.ndim() != 4) fail_shape(op, "expected [B,C,H,W]", x.shape());
}

}  // namespace

Tensor conv2d_depthwise(Tape* tape, const Tensor& x, const Tensor& k,
                        const Tensor& bias) {
  check_nchw("conv2d_depthwise", x);
  if (k.ndim() != 3 || k.dim(0) != x.dim(1) || k.dim(1) != k.dim(2) ||
      k.dim(1) % 2 == 0)
    fail_shape2("conv2d_depthwise", x.shape(), k.shape());
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != x.dim(1)))
    fail_shape2("conv2d_depthwise", x.shape(), bias.shape());
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = k.dim(1), P = (K - 1) / 2;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  const double* pk = k.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const double* xc = px + (b * C + c) * H * W;
      const double* kc = pk + c * K * K;
      double* oc = po + (b * C + c) * H * W;
      double bv = bias.defined() ? bias.data()[static_cast<size_t>(c)] : 0.0;
      for (int64_t i = 0; i < H; ++i) {
        for (int64_t j = 0; j < W; ++j) {
          double acc = bv;
          for (int64_t u = 0; u < K; ++u) {
            int64_t ii = i + u - P;
            if (ii < 0 || ii >= H) continue;
            for (int64_t v = 0; v < K; ++v) {
              int64_t jj = j + v - P;
              if (jj < 0 || jj >= W) continue;
              acc += xc[ii * W + jj] * kc[u * K + v];
            }
          }
          oc[i * W + j] = acc;
        }
      }
    }
  }
  if (tape && any_grad3(x, k, bias)) {
    out.set_requires_grad(true);
    Tensor tx = x, tk = k, tb = bias, to = out;
    tape->record(out, [tx, tk, tb, to, B, C, H, W, K, P]() mutable {
      const double* g = to.grad().data();
      const double* px2 = tx.data().data();
      const double* pk2 = tk.data().data();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
          const double* gc = g + (b * C + c) * H * W;
          const double* xc = px2 + (b * C + c) * H * W;
          const double* kc = pk2 + c * K * K;
          for (int64_t i = 0; i < H; ++i) {
            for (int64_t j = 0; j < W; ++j) {
              double gv = gc[i * W + j];
              if (gv == 0.0) continue;
              for (int64_t u = 0; u < K; ++u) {
                int64_t ii = i + u - P;
                if (ii < 0 || ii >= H) continue;
                for (int64_t v = 0; v < K; ++v) {
                  int64_t jj = j + v - P;
                  if (jj < 0 || jj >= W) continue;
                  if (tx.requires_grad())
                    tx.grad()[static_cast<size_t>((b * C + c) * H * W +
                                                  ii * W + jj)] +=
                        gv * kc[u * K + v];
                  if (tk.requires_grad())
                    tk.grad()[static_cast<size_t>(c * K * K + u * K + v)] +=
                        gv * xc[ii * W + jj];
                }
              }
              if (tb.defined() && tb.requires_grad())
                tb.grad()[static_cast<size_t>(c)] += gv;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d_depthwise_strided2(Tape* tape, const Tensor& x, const Tensor& k,
                                 const Tensor& bias) {
  check_nchw("conv2d_depthwise_strided2", x);
  if (k.ndim() != 3 || k.dim(0) != x.dim(1) || k.dim(1) != 3 || k.dim(2) != 3)
    fail_shape2("conv2d_depthwise_strided2", x.shape(), k.shape());
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  const double* px = x.data().data();
  const double* pk = k.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const double* xc = px + (b * C + c) * H * W;
      const double* kc = pk + c * 9;
      double* oc = po + (b * C + c) * Ho * Wo;
    double bv = bias.defined() ? bias.data()[static_cast<size_t>(c)] : 0.0;
      for (int64_t i = 0; i < Ho; ++i) {
        for (int64_t j = 0; j < Wo; ++j) {
          double acc = bv;
          for (int64_t u = 0; u < 3; ++u) {
            int64_t ii = 2 * i + u - 1;
            if (ii < 0 || ii >= H) continue;
            for (int64_t v = 0; v < 3; ++v) {
              int64_t jj = 2 * j + v - 1;
              if (jj < 0 || jj >= W) continue;
              acc += xc[ii * W + jj] * kc[u * 3 + v];
            }
          }
          oc[i * Wo + j] = acc;
        }
      }
    }
  }
  if (tape && any_grad3(x, k, bias)) {
    out.set_requires_grad(true);
    Tensor tx = x, tk = k, tb = bias, to = out;
    tape->record(out, [tx, tk, tb, to, B, C, H, W, Ho, Wo]() mutable {
      const double* g = to.grad().data();
      const double* px2 = tx.data().data();
      const double* pk2 = tk.data().data();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
          const double* gc = g + (b * C + c) * Ho * Wo;
          const double* xc = px2 + (b * C + c) * H * W;
          const double* kc = pk2 + c * 9;
          for (int64_t i = 0; i < Ho; ++i) {
            for (int64_t j = 0; j < Wo; ++j) {
              double gv = gc[i * Wo + j];
              if (gv == 0.0) continue;
              for (int64_t u = 0; u < 3; ++u) {
                int64_t ii = 2 * i + u - 1;
                if (ii < 0 || ii >= H) continue;
                for (int64_t v = 0; v < 3; ++v) {
                  int64_t jj = 2 * j + v - 1;
                  if (jj < 0 || jj >= W) continue;
                  if (tx.requires_grad())
                    tx.grad()[static_cast<size_t>((b * C + c) * H * W +
                                                  ii * W + jj)] +=
                        gv * kc[u * 3 + v];
                  if (tk.requires_grad())
                    tk.grad()[static_cast<size_t>(c * 9 + u * 3 + v)] +=
                        gv * xc[ii * W + jj];
                }
              }
              if (tb.defined() && tb.requires_grad())
                tb.grad()[static_cast<size_t>(c)] += gv;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d_pointwise(Tape* tape, const Tensor& x, const Tensor& w,
                        const Tensor& bias) {
  check_nchw("conv2d_pointwise", x);
  if (w.ndim() != 2 || w.dim(1) != x.dim(1))
    fail_shape2("conv2d_pointwise", x.shape(), w.shape());
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), HW = H * W;
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    fail_shape2("conv2d_pointwise", w.shape(), bias.shape());
  Tensor out = Tensor::zeros({B, Cout, H, W});
  const double* px = x.data().data();
  const double* pw = w.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < B; ++b) {
    const double* xb = px + b * Cin * HW;
    double* ob = po + b * Cout * HW;
    for (int64_t o = 0; o < Cout; ++o) {
      double* oc = ob + o * HW;
      double bv = bias.defined() ? bias.data()[static_cast<size_t>(o)] : 0.0;
      for (int64_t p = 0; p < HW; ++p) oc[p] = bv;
      const double* wrow = pw + o * Cin;
      for (int64_t c = 0; c < Cin; ++c) {
        double wv = wrow[c];
        if (wv == 0.0) continue;
        const double* xc = xb + c * HW;
        for (int64_t p = 0; p < HW; ++p) oc[p] += wv * xc[p];
      }
    }
  }
  if (tape && any_grad3(x, w, bias)) {
    out.set_requires_grad(true);
    Tensor tx = x, tw = w, tb = bias, to = out;
    tape->record(out, [tx, tw, tb, to, B, Cin, Cout, HW]() mutable {
      const double* g = to.grad().data();
      const double* px2 = tx.data().data();
      const double* pw2 = tw.data().data();
      for (int64_t b = 0; b < B; ++b) {
        const double* gb = g + b * Cout * HW;
        const double* xb = px2 + b * Cin * HW;
        for (int64_t o = 0; o < Cout; ++o) {
          const double* go = gb + o * HW;
          const double* wrow = pw2 + o * Cin;
          if (tx.requires_grad()) {
            double* gxb = tx.grad().data() + b * Cin * HW;
            for (int64_t c = 0; c < Cin; ++c) {
              double wv = wrow[c];
              double* gxc = gxb + c * HW;
              for (int64_t p = 0; p < HW; ++p) gxc[p] += wv * go[p];
            }
          }
          if (tw.requires_grad()) {
            double* gwrow = tw.grad().data() + o * Cin;
            for (int64_t c = 0; c < Cin; ++c) {
              const double* xc = xb + c * HW;
              double acc = 0.0;
              for (int64_t p = 0; p < HW; ++p) acc += xc[p] * go[p];
              gwrow[c] += acc;
            }
          }
          if (tb.defined() && tb.requires_grad()) {
            double acc = 0.0;
            for (int64_t p = 0; p < HW; ++p) acc += go[p];
            tb.grad()[static_cast<size_t>(o)] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d_strided(Tape* tape, const Tensor& x, const Tensor& w,
                      const Tensor& bias, int stride) {
  check_nchw("conv2d_strided", x);
  if (stride != 1 && stride != 2)
    throw ConfigError("conv2d_strided: stride must be 1 or 2");
  if (w.ndim() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != 3 || w.dim(3) != 3)
    fail_shape2("conv2d_strided", x.shape(), w.shape());
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0);
  const int64_t Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    fail_shape2("conv2d_strided", w.shape(), bias.shape());
  Tensor out = Tensor::zeros({B, Cout, Ho, Wo});
  const double* px = x.data().data();
  const double* pw = w.data().data();
  double* po = out.data().data();
  const int64_t s = stride;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < Cout; ++o) {
      double* oc = po + (b * Cout + o) * Ho * Wo;
      double bv = bias.defined() ? bias.data()[static_cast<size_t>(o)] : 0.0;
      for (int64_t p = 0; p < Ho * Wo; ++p) oc[p] = bv;
      for (int64_t c = 0; c < Cin; ++c) {
        const double* xc = px + (b * Cin + c) * H * W;
        const double* kc = pw + (o * Cin + c) * 9;
        for (int64_t i = 0; i < Ho; ++i) {
          for (int64_t j = 0; j < Wo; ++j) {
            double acc = 0.0;
            for (int64_t u = 0; u < 3; ++u) {
              int64_t ii = s * i + u - 1;
              if (ii < 0 || ii >= H) continue;
              for (int64_t v = 0; v < 3; ++v) {
                int64_t jj = s * j + v - 1;
                if (jj < 0 || jj >= W) continue;
                acc += xc[ii * W + jj] * kc[u * 3 + v];
              }
            }
            oc[i * Wo + j] += acc;
          }
        }
      }
    }
  }
  if (tape && any_grad3(x, w, bias)) {
    out.set_requires_grad(true);
    Tensor tx = x, tw = w, tb = bias, to = out;
    tape->record(out, [tx, tw, tb, to, B, Cin, Cout, H, W, Ho, Wo, s]() mutable {
      const double* g = to.grad().data();
      const double* px2 = tx.data().data();
      const double* pw2 = tw.data().data();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t o = 0; o < Cout; ++o) {
          const double* gc = g + (b * Cout + o) * Ho * Wo;
          if (tb.defined() && tb.requires_grad()) {
            double acc = 0.0;
            for (int64_t p = 0; p < Ho * Wo; ++p) acc += gc[p];
            tb.grad()[static_cast<size_t>(o)] += acc;
          }
          for (int64_t c = 0; c < Cin; ++c) {
            const double* xc = px2 + (b * Cin + c) * H * W;
            const double* kc = pw2 + (o * Cin + c) * 9;
            double* gxc = tx.requires_grad()
                              ? tx.grad().data() + (b * Cin + c) * H * W
                              : nullptr;
            double* gkc = tw.requires_grad()
                              ? tw.grad().data() + (o * Cin + c) * 9
                              : nullptr;
            for (int64_t i = 0; i < Ho; ++i) {
              for (int64_t j = 0; j < Wo; ++j) {
                double gv = gc[i * Wo + j];
                if (gv == 0.0) continue;
                for (int64_t u = 0; u < 3; ++u) {
                  int64_t ii = s * i + u - 1;
                  if (ii < 0 || ii >= H) continue;
                  for (int64_t v = 0; v < 3; ++v) {
                    int64_t jj = s * j + v - 1;
                    if (jj < 0 || jj >= W) continue;
                    if (gxc) gxc[ii * W + jj] += gv * kc[u * 3 + v];
                    if (gkc) gkc[u * 3 + v] += gv * xc[ii * W + jj];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor pool2d(Tape* tape, const Tensor& x, PoolKind kind, int kernel) {
  check_nchw("pool2d", x);
  if (kernel < 1 || kernel % 2 == 0)
    throw ConfigError("pool2d: kernel must be odd and positive");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = kernel, P = (K - 1) / 2;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  double* po = out.data().data();
  // argmin/argmax taps for min/max backward
  std::shared_ptr<std::vector<int32_t>> arg;
  if (kind != PoolKind::avg)
    arg = std::make_shared<std::vector<int32_t>>(x.data().size());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const int64_t off = (b * C + c) * H * W;
      const double* xc = px + off;
      double* oc = po + off;
      for (int64_t i = 0; i < H; ++i) {
        for (int64_t j = 0; j < W; ++j) {
          if (kind == PoolKind::avg) {
            double acc = 0.0;
            int64_t cnt = 0;
            for (int64_t u = 0; u < K; ++u) {
              int64_t ii = i + u - P;
              if (ii < 0 || ii >= H) continue;
              for (int64_t v = 0; v < K; ++v) {
                int64_t jj = j + v - P;
                if (jj < 0 || jj >= W) continue;
                acc += xc[ii * W + jj];
                ++cnt;
              }
            }
            oc[i * W + j] = acc / static_cast<double>(cnt);
          } else {
            double best = 0.0;
            int64_t best_p = -1;
            for (int64_t u = 0; u < K; ++u) {
              int64_t ii = i + u - P;
              if (ii < 0 || ii >= H) continue;
              for (int64_t v = 0; v < K; ++v) {
                int64_t jj = j + v - P;
                if (jj < 0 || jj >= W) continue;
                double val = xc[ii * W + jj];
                bool better = best_p < 0 || (kind == PoolKind::max
                                                 ? val > best
                                                 : val < best);
                if (better) {
                  best = val;
                  best_p = ii * W + jj;
                }
              }
            }
            oc[i * W + j] = best;
            (*arg)[static_cast<size_t>(off + i * W + j)] =
                static_cast<int32_t>(best_p);
          }
        }
      }
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, kind, B, C, H, W, K, P, arg]() mutable {
      const double* g = to.grad().data();
      double* gx = tx.grad().data();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
          const int64_t off = (b * C + c) * H * W;
          for (int64_t i = 0; i < H; ++i) {
            for (int64_t j = 0; j < W; ++j) {
              double gv = g[off + i * W + j];
              if (gv == 0.0) continue;
              if (kind == PoolKind::avg) {
                int64_t cnt = 0;
                for (int64_t u = 0; u < K; ++u) {
                  int64_t ii = i + u - P;
                  if (ii < 0 || ii >= H) continue;
                  for (int64_t v = 0; v < K; ++v) {
                    int64_t jj = j + v - P;
                    if (jj < 0 || jj >= W) continue;
                    ++cnt;
                  }
                }
                double share = gv / static_cast<double>(cnt);
                for (int64_t u = 0; u < K; ++u) {
                  int64_t ii = i + u - P;
                  if (ii < 0 || ii >= H) continue;
                  for (int64_t v = 0; v < K; ++v) {
                    int64_t jj = j + v - P;
                    if (jj < 0 || jj >= W) continue;
                    gx[off + ii * W + jj] += share;
                  }
                }
              } else {
                gx[off + (*arg)[static_cast<size_t>(off + i * W + j)]] += gv;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(Tape* tape, const Tensor& x) {
  check_nchw("global_avg_pool", x);
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({B, C});
  const double* px = x.data().data();
  double* po = out.data().data();
  const double inv = 1.0 / static_cast<double>(HW);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* xc = px + (b * C + c) * HW;
      double acc = 0.0;
      for (int64_t p = 0; p < HW; ++p) acc += xc[p];
      po[b * C + c] = acc * inv;
    }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, B, C, HW, inv]() mutable {
      const double* g = to.grad().data();
      double* gx = tx.grad().data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          double gv = g[b * C + c] * inv;
          double* gxc = gx + (b * C + c) * HW;
          for (int64_t p = 0; p < HW; ++p) gxc[p] += gv;
        }
    });
  }
  return out;
}

Tensor mean_tokens(Tape* tape, const Tensor& x) {
  if (x.ndim() != 3) fail_shape("mean_tokens", "expected [B,N,D]", x.shape());
  const int64_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  Tensor out = Tensor::zeros({B, D});
  const double* px = x.data().data();
  double* po = out.data().data();
  const double inv = 1.0 / static_cast<double>(N);
  for (int64_t b = 0; b < B; ++b) {
    double* ob = po + b * D;
    for (int64_t n = 0; n < N; ++n) {
      const double* xr = px + (b * N + n) * D;
      for (int64_t d = 0; d < D; ++d) ob[d] += xr[d];
    }
    for (int64_t d = 0; d < D; ++d) ob[d] *= inv;
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, B, N, D, inv]() mutable {
      const double* g = to.grad().data();
      double* gx = tx.grad().data();
      for (int64_t b = 0; b < B; ++b) {
        const double* gb = g + b * D;
        for (int64_t n = 0; n < N; ++n) {
          double* gxr = gx + (b * N + n) * D;
          for (int64_t d = 0; d < D; ++d) gxr[d] += gb[d] * inv;
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(Tape* tape, const Tensor& logits,
                     const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    fail_shape("cross_entropy", "expected [B,C]", logits.shape());
  const int64_t B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw ShapeError("cross_entropy: labels size does not match batch");
  for (int lb : labels)
    if (lb < 0 || lb >= C)
      throw ShapeError("cross_entropy: label out of range");
  auto probs = std::make_shared<std::vector<double>>(logits.data().size());
  const double* px = logits.data().data();
  double* pp = probs->data();
  double total = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const double* row = px + b * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      double e = std::exp(row[c] - mx);
      pp[b * C + c] = e;
      denom += e;
    }
    double inv = 1.0 / denom;
    for (int64_t c = 0; c < C; ++c) pp[b * C + c] *= inv;
    total += std::log(denom) + mx - row[labels[static_cast<size_t>(b)]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tl = logits, to = out;
    auto lbl = std::make_shared<std::vector<int>>(labels);
    tape->record(out, [tl, to, probs, lbl, B, C]() mutable {
      double g = to.grad()[0] / static_cast<double>(B);
      double* gx = tl.grad().data();
      const double* pp2 = probs->data();
      for (int64_t b = 0; b < B; ++b) {
        int lb = (*lbl)[static_cast<size_t>(b)];
        for (int64_t c = 0; c < C; ++c) {
          double ind = (c == lb) ? 1.0 : 0.0;
          gx[b * C + c] += g * (pp2[b * C + c] - ind);
        }
      }
    });
  }
  return out;
}

namespace {

void check_heads(const char* op, const Tensor& q, const Tensor& k,
                 const Tensor& v) {
  if (q.ndim() != 4) fail_shape(op, "expected [B,h,N,dh]", q.shape());
  if (q.shape() != k.shape() || q.shape() != v.shape())
    fail_shape2(op, q.shape(), k.shape());
}

// softmax over rows of an n x m matrix, in place
void softmax_rows(double* a, int64_t n, int64_t m) {
  for (int64_t i = 0; i < n; ++i) {
    double* row = a + i * m;
    double mx = row[0];
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    double inv = 1.0 / denom;
    for (int64_t j = 0; j < m; ++j) row[j] *= inv;
  }
}

}  // namespace

Tensor factorized_attention(Tape* tape, const Tensor& q, const Tensor& k,
                            const Tensor& v, double scale,
                            bool softmax_on_context) {
  check_heads("factorized_attention", q, k, v);
  const int64_t B = q.dim(0), Hh = q.dim(1), N = q.dim(2), D = q.dim(3);
  Tensor out = Tensor::zeros(q.shape());
  const int64_t BH = B * Hh;
  // saved activations for backward: per (b,h) either softmax_N(k) and ctx,
  // or the row-softmaxed context
  auto ks_store = std::make_shared<std::vector<double>>(
      softmax_on_context ? 0 : q.data().size());
  auto ctx_store =
      std::make_shared<std::vector<double>>(static_cast<size_t>(BH * D * D));
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  double* po = out.data().data();
  for (int64_t bh = 0; bh < BH; ++bh) {
    const double* kq = pk + bh * N * D;
    const double* vv = pv + bh * N * D;
    double* ctx = ctx_store->data() + bh * D * D;
    if (!softmax_on_context) {
      double* ks = ks_store->data() + bh * N * D;
      // softmax over the token axis, per channel
      for (int64_t e = 0; e < D; ++e) {
        double mx = kq[e];
        for (int64_t t = 1; t < N; ++t) mx = std::max(mx, kq[t * D + e]);
        double denom = 0.0;
        for (int64_t t = 0; t < N; ++t) {
          double ev = std::exp(kq[t * D + e] - mx);
          ks[t * D + e] = ev;
          denom += ev;
        }
        double inv = 1.0 / denom;
        for (int64_t t = 0; t < N; ++t) ks[t * D + e] *= inv;
      }
      for (int64_t t = 0; t < N; ++t)
        for (int64_t e = 0; e < D; ++e) {
          double kv = ks[t * D + e];
          const double* vrow = vv + t * D;
          double* crow = ctx + e * D;
          for (int64_t f = 0; f < D; ++f) crow[f] += kv * vrow[f];
        }
    } else {
      for (int64_t t = 0; t < N; ++t)
        for (int64_t e = 0; e < D; ++e) {
          double kv = kq[t * D + e];
          const double* vrow = vv + t * D;
          double* crow = ctx + e * D;
          for (int64_t f = 0; f < D; ++f) crow[f] += kv * vrow[f];
        }
      softmax_rows(ctx, D, D);
    }
    const double* qq = pq + bh * N * D;
    double* oo = po + bh * N * D;
    for (int64_t t = 0; t < N; ++t) {
      const double* qrow = qq + t * D;
      double* orow = oo + t * D;
      for (int64_t e = 0; e < D; ++e) {
        double qv = qrow[e] * scale;
        const double* crow = ctx + e * D;
        for (int64_t f = 0; f < D; ++f) orow[f] += qv * crow[f];
      }
    }
  }
  if (tape && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    Tensor tq = q, tk = k, tv = v, to = out;
    tape->record(out, [tq, tk, tv, to, scale, softmax_on_context, BH, N, D,
                       ks_store, ctx_store]() mutable {
      const double* g = to.grad().data();
      const double* pq2 = tq.data().data();
      const double* pk2 = tk.data().data();
      const double* pv2 = tv.data().data();
      std::vector<double> dctx(static_cast<size_t>(D * D));
      std::vector<double> dpre(static_cast<size_t>(D * D));
      for (int64_t bh = 0; bh < BH; ++bh) {
        const double* go = g + bh * N * D;
        const double* qq = pq2 + bh * N * D;
        const double* ctx = ctx_store->data() + bh * D * D;
        std::fill(dctx.begin(), dctx.end(), 0.0);
        // dq and dctx from out = scale * q @ ctx
        for (int64_t t = 0; t < N; ++t) {
          const double* grow = go + t * D;
          const double* qrow = qq + t * D;
          if (tq.requires_grad()) {
            double* gqrow = tq.grad().data() + (bh * N + t) * D;
            for (int64_t e = 0; e < D; ++e) {
              double acc = 0.0;
              const double* crow = ctx + e * D;
              for (int64_t f = 0; f < D; ++f) acc += grow[f] * crow[f];
              gqrow[e] += scale * acc;
            }
          }
          for (int64_t e = 0; e < D; ++e) {
            double qv = qrow[e] * scale;
            double* drow = dctx.data() + e * D;
            for (int64_t f = 0; f < D; ++f) drow[f] += qv * grow[f];
          }
        }
        if (!softmax_on_context) {
          const double* ks = ks_store->data() + bh * N * D;
          // dv = Ks @ dctx ; dKs = v @ dctx^T ; dk via softmax jacobian
          std::vector<double> dks(static_cast<size_t>(N * D));
          for (int64_t t = 0; t < N; ++t) {
            const double* vrow = pv2 + (bh * N + t) * D;
            const double* krow = ks + t * D;
            double* dvrow =
                tv.requires_grad() ? tv.grad().data() + (bh * N + t) * D
                                   : nullptr;
            double* dkrow = dks.data() + t * D;
            for (int64_t e = 0; e < D; ++e) {
              const double* drow = dctx.data() + e * D;
              double acc = 0.0;
              for (int64_t f = 0; f < D; ++f) acc += vrow[f] * drow[f];
              dkrow[e] = acc;
              if (dvrow) {
                double kv = krow[e];
                for (int64_t f = 0; f < D; ++f) dvrow[f] += kv * drow[f];
              }
            }
          }
          if (tk.requires_grad()) {
            double* gk = tk.grad().data() + bh * N * D;
            for (int64_t e = 0; e < D; ++e) {
              double dot = 0.0;
              for (int64_t t = 0; t < N; ++t)
                dot += dks[static_cast<size_t>(t * D + e)] * ks[t * D + e];
              for (int64_t t = 0; t < N; ++t)
                gk[t * D + e] += ks[t * D + e] *
                                 (dks[static_cast<size_t>(t * D + e)] - dot);
            }
          }
        } else {
          // ctx = softmax_rows(k^T v); dpre = row softmax backward
          for (int64_t e = 0; e < D; ++e) {
            const double* crow = ctx + e * D;
            const double* drow = dctx.data() + e * D;
            double dot = 0.0;
            for (int64_t f = 0; f < D; ++f) dot += drow[f] * crow[f];
            double* prow = dpre.data() + e * D;
            for (int64_t f = 0; f < D; ++f)
              prow[f] = crow[f] * (drow[f] - dot);
          }
          for (int64_t t = 0; t < N; ++t) {
            const double* krow = pk2 + (bh * N + t) * D;
            const double* vrow = pv2 + (bh * N + t) * D;
            double* gkrow = tk.requires_grad()
                                ? tk.grad().data() + (bh * N + t) * D
                                : nullptr;
            double* gvrow = tv.requires_grad()
                                ? tv.grad().data() + (bh * N + t) * D
                                : nullptr;
            for (int64_t e = 0; e < D; ++e) {
              const double* prow = dpre.data() + e * D;
              if (gkrow) {
                double acc = 0.0;
                for (int64_t f = 0; f < D; ++f) acc += prow[f] * vrow[f];
                gkrow[e] += acc;
              }
              if (gvrow) {
                double kv = krow[e];
                for (int64_t f = 0; f < D; ++f) gvrow[f] += kv * prow[f];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor vanilla_attention(Tape* tape, const Tensor& q, const Tensor& k,
                         const Tensor& v, double scale) {
  check_heads("vanilla_attention", q, k, v);
  const int64_t B = q.dim(0), Hh = q.dim(1), N = q.dim(2), D = q.dim(3);
  const int64_t BH = B * Hh;
  Tensor out = Tensor::zeros(q.shape());
  auto attn_store =
      std::make_shared<std::vector<double>>(static_cast<size_t>(BH * N * N));
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  double* po = out.data().data();
  for (int64_t bh = 0; bh < BH; ++bh) {
    const double* qq = pq + bh * N * D;
    const double* kk = pk + bh * N * D;
    const double* vv = pv + bh * N * D;
    double* attn = attn_store->data() + bh * N * N;
    for (int64_t t = 0; t < N; ++t) {
      const double* qrow = qq + t * D;
      double* arow = attn + t * N;
      for (int64_t u = 0; u < N; ++u) {
        const double* krow = kk + u * D;
        double acc = 0.0;
        for (int64_t e = 0; e < D; ++e) acc += qrow[e] * krow[e];
        arow[u] = acc * scale;
      }
    }
    softmax_rows(attn, N, N);
    double* oo = po + bh * N * D;
    for (int64_t t = 0; t < N; ++t) {
      const double* arow = attn + t * N;
      double* orow = oo + t * D;
      for (int64_t u = 0; u < N; ++u) {
        double av = arow[u];
        const double* vrow = vv + u * D;
        for (int64_t f = 0; f < D; ++f) orow[f] += av * vrow[f];
      }
    }
  }
  if (tape && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    Tensor tq = q, tk = k, tv = v, to = out;
    tape->record(out, [tq, tk, tv, to, scale, BH, N, D, attn_store]() mutable {
      const double* g = to.grad().data();
      const double* pq2 = tq.data().data();
      const double* pk2 = tk.data().data();
      const double* pv2 = tv.data().data();
      std::vector<double> ds(static_cast<size_t>(N));
      for (int64_t bh = 0; bh < BH; ++bh) {
        const double* go = g + bh * N * D;
        const double* attn = attn_store->data() + bh * N * N;
        for (int64_t t = 0; t < N; ++t) {
          const double* grow = go + t * D;
          const double* arow = attn + t * N;
          // dA and dv
          double dot = 0.0;
          for (int64_t u = 0; u < N; ++u) {
            const double* vrow = pv2 + (bh * N + u) * D;
            double acc = 0.0;
            for (int64_t f = 0; f < D; ++f) acc += grow[f] * vrow[f];
            ds[static_cast<size_t>(u)] = acc;
            dot += acc * arow[u];
          }
          if (tv.requires_grad()) {
            for (int64_t u = 0; u < N; ++u) {
              double av = arow[u];
              if (av == 0.0) continue;
              double* gvrow = tv.grad().data() + (bh * N + u) * D;
              for (int64_t f = 0; f < D; ++f) gvrow[f] += av * grow[f];
            }
          }
          // dS = softmax backward, then dq/dk
          for (int64_t u = 0; u < N; ++u) {
            double dsv = arow[u] * (ds[static_cast<size_t>(u)] - dot) * scale;
            if (dsv == 0.0) continue;
            const double* krow = pk2 + (bh * N + u) * D;
            const double* qrow = pq2 + (bh * N + t) * D;
            if (tq.requires_grad()) {
              double* gqrow = tq.grad().data() + (bh * N + t) * D;
              for (int64_t e = 0; e < D; ++e) gqrow[e] += dsv * krow[e];
            }
            if (tk.requires_grad()) {
              double* gkrow = tk.grad().data() + (bh * N + u) * D;
              for (int64_t e = 0; e < D; ++e) gkrow[e] += dsv * qrow[e];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor drop_path(Tape* tape, const Tensor& x, const Tensor& residual,
                 double drop_prob, bool training, Rng* rng) {
  if (x.shape() != residual.shape())
    fail_shape2("drop_path", x.shape(), residual.shape());
  if (drop_prob < 0.0 || drop_prob >= 1.0)
    throw ConfigError("drop_path: drop_prob must be in [0,1)");
  const int64_t B = x.dim(0);
  const int64_t per = x.numel() / B;
  auto factor = std::make_shared<std::vector<double>>(static_cast<size_t>(B),
                                                      1.0);
  if (training && drop_prob > 0.0) {
    if (!rng) throw ContractError("drop_path: rng required in training mode");
    double keep = 1.0 - drop_prob;
    for (int64_t b = 0; b < B; ++b)
      (*factor)[static_cast<size_t>(b)] =
          rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  }
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  const double* pr = residual.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < B; ++b) {
    double f = (*factor)[static_cast<size_t>(b)];
    const double* xb = px + b * per;
    const double* rb = pr + b * per;
    double* ob = po + b * per;
    for (int64_t i = 0; i < per; ++i) ob[i] = xb[i] + f * rb[i];
  }
  if (tape && (x.requires_grad() || residual.requires_grad())) {
    out.set_requires_grad(true);
    Tensor tx = x, tr = residual, to = out;
    tape->record(out, [tx, tr, to, factor, B, per]() mutable {
      const double* g = to.grad().data();
      if (tx.requires_grad()) {
        double* gx = tx.grad().data();
        for (int64_t i = 0; i < B * per; ++i) gx[i] += g[i];
      }
      if (tr.requires_grad()) {
        double* gr = tr.grad().data();
        for (int64_t b = 0; b < B; ++b) {
          double f = (*factor)[static_cast<size_t>(b)];
          if (f == 0.0) continue;
          const double* gb = g + b * per;
          double* grb = gr + b * per;
          for (int64_t i = 0; i < per; ++i) grb[i] += f * gb[i];
        }
      }
    });
  }
  return out;
}

}  // namespace gmx::ops
