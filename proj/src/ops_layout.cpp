#include "gmx/error.hpp"
#include "gmx/ops.hpp"

namespace gmx::ops {

namespace {

// shared plumbing for pure index-permutation ops: `fwd` fills out.data()
// from x.data(); backward applies the inverse map to accumulate gradients.
template <class Fwd, class Bwd>
Tensor permutation_op(Tape* tape, const Tensor& x, Shape out_shape, Fwd fwd,
                      Bwd bwd) {
  Tensor out = Tensor::zeros(std::move(out_shape));
  fwd(x.data().data(), out.data().data());
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, bwd]() mutable {
      bwd(to.grad().data(), tx.grad().data());
    });
  }
  return out;
}

}  // namespace

Tensor tokens_to_spatial(Tape* tape, const Tensor& x, int64_t H, int64_t W) {
  if (x.ndim() != 3 || x.dim(1) != H * W)
    fail_shape("tokens_to_spatial", "expected [B,H*W,D]", x.shape());
  const int64_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  auto fwd = [B, N, D](const double* in, double* out) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n) {
        const double* row = in + (b * N + n) * D;
        double* ob = out + b * D * N + n;
        for (int64_t d = 0; d < D; ++d) ob[d * N] = row[d];
      }
  };
  auto bwd = [B, N, D](const double* g, double* gx) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n) {
        double* row = gx + (b * N + n) * D;
        const double* gb = g + b * D * N + n;
        for (int64_t d = 0; d < D; ++d) row[d] += gb[d * N];
      }
  };
  return permutation_op(tape, x, {B, D, H, W}, fwd, bwd);
}

Tensor spatial_to_tokens(Tape* tape, const Tensor& x) {
  if (x.ndim() != 4)
    fail_shape("spatial_to_tokens", "expected [B,D,H,W]", x.shape());
  const int64_t B = x.dim(0), D = x.dim(1), N = x.dim(2) * x.dim(3);
  auto fwd = [B, N, D](const double* in, double* out) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t d = 0; d < D; ++d) {
        const double* ic = in + (b * D + d) * N;
        double* ob = out + b * N * D + d;
        for (int64_t n = 0; n < N; ++n) ob[n * D] = ic[n];
      }
  };
  auto bwd = [B, N, D](const double* g, double* gx) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t d = 0; d < D; ++d) {
        double* ic = gx + (b * D + d) * N;
        const double* gb = g + b * N * D + d;
        for (int64_t n = 0; n < N; ++n) ic[n] += gb[n * D];
      }
  };
  return permutation_op(tape, x, {B, N, D}, fwd, bwd);
}

Tensor qkv_stack(Tape* tape, const Tensor& x, int64_t H, int64_t W) {
  if (x.ndim() != 3 || x.dim(2) % 3 != 0 || x.dim(1) != H * W)
    fail_shape("qkv_stack", "expected [B,H*W,3D]", x.shape());
  const int64_t B = x.dim(0), N = x.dim(1), D = x.dim(2) / 3;
  auto fwd = [B, N, D](const double* in, double* out) {
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
          const double* row = in + (b * N + n) * 3 * D + t * D;
          double* ob = out + ((t * B + b) * D) * N + n;
          for (int64_t d = 0; d < D; ++d) ob[d * N] = row[d];
        }
  };
  auto bwd = [B, N, D](const double* g, double* gx) {
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
          double* row = gx + (b * N + n) * 3 * D + t * D;
          const double* gb = g + ((t * B + b) * D) * N + n;
          for (int64_t d = 0; d < D; ++d) row[d] += gb[d * N];
        }
  };
  return permutation_op(tape, x, {3 * B, D, H, W}, fwd, bwd);
}

Tensor qkv_regroup(Tape* tape, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(0) % 3 != 0)
    fail_shape("qkv_regroup", "expected [3B,s,H,W]", x.shape());
  const int64_t B = x.dim(0) / 3, S = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto fwd = [B, S, HW](const double* in, double* out) {
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < S; ++c) {
          const double* ic = in + ((t * B + b) * S + c) * HW;
          double* oc = out + (b * 3 * S + t * S + c) * HW;
          for (int64_t p = 0; p < HW; ++p) oc[p] = ic[p];
        }
  };
  auto bwd = [B, S, HW](const double* g, double* gx) {
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < S; ++c) {
          double* ic = gx + ((t * B + b) * S + c) * HW;
          const double* gc = g + (b * 3 * S + t * S + c) * HW;
          for (int64_t p = 0; p < HW; ++p) ic[p] += gc[p];
        }
  };
  return permutation_op(tape, x, {B, 3 * S, x.dim(2), x.dim(3)}, fwd, bwd);
}

Tensor mean_channel_groups(Tape* tape, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) % 3 != 0)
    fail_shape("mean_channel_groups", "expected [B,3s,H,W]", x.shape());
  const int64_t B = x.dim(0), S = x.dim(1) / 3, HW = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({B, S, x.dim(2), x.dim(3)});
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < S; ++c) {
      double* oc = po + (b * S + c) * HW;
      for (int64_t t = 0; t < 3; ++t) {
        const double* ic = px + (b * 3 * S + t * S + c) * HW;
        for (int64_t p = 0; p < HW; ++p) oc[p] += ic[p];
      }
      for (int64_t p = 0; p < HW; ++p) oc[p] /= 3.0;
    }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record(out, [tx, to, B, S, HW]() mutable {
      const double* g = to.grad().data();
      double* gx = tx.grad().data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < S; ++c) {
          const double* gc = g + (b * S + c) * HW;
          for (int64_t t = 0; t < 3; ++t) {
            double* ic = gx + (b * 3 * S + t * S + c) * HW;
            for (int64_t p = 0; p < HW; ++p) ic[p] += gc[p] / 3.0;
          }
        }
    });
  }
  return out;
}

Tensor slice_channels(Tape* tape, const Tensor& x, int64_t c0, int64_t c1) {
  if (x.ndim() != 4) fail_shape("slice_channels", "expected NCHW", x.shape());
  if (c0 < 0 || c1 <= c0 || c1 > x.dim(1))
    fail_shape("slice_channels", "invalid channel range", x.shape());
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int64_t S = c1 - c0;
  auto fwd = [B, C, HW, c0, S](const double* in, double* out) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < S; ++c) {
        const double* ic = in + (b * C + c0 + c) * HW;
        double* oc = out + (b * S + c) * HW;
        for (int64_t p = 0; p < HW; ++p) oc[p] = ic[p];
      }
  };
  auto bwd = [B, C, HW, c0, S](const double* g, double* gx) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < S; ++c) {
        double* ic = gx + (b * C + c0 + c) * HW;
        const double* gc = g + (b * S + c) * HW;
        for (int64_t p = 0; p < HW; ++p) ic[p] += gc[p];
      }
  };
  return permutation_op(tape, x, {B, S, x.dim(2), x.dim(3)}, fwd, bwd);
}

Tensor concat_channels(Tape* tape, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: empty input list");
  const int64_t B = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int64_t Ctot = 0;
  bool needs_grad = false;
  for (const Tensor& t : xs) {
    if (t.ndim() != 4 || t.dim(0) != B || t.dim(2) != H || t.dim(3) != W)
      fail_shape2("concat_channels", xs[0].shape(), t.shape());
    Ctot += t.dim(1);
    needs_grad = needs_grad || t.requires_grad();
  }
  const int64_t HW = H * W;
  Tensor out = Tensor::zeros({B, Ctot, H, W});
  double* po = out.data().data();
  int64_t coff = 0;
  for (const Tensor& t : xs) {
    const int64_t C = t.dim(1);
    const double* px = t.data().data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* ic = px + (b * C + c) * HW;
        double* oc = po + (b * Ctot + coff + c) * HW;
        for (int64_t p = 0; p < HW; ++p) oc[p] = ic[p];
      }
    coff += C;
  }
  if (tape && needs_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> txs = xs;
    Tensor to = out;
    tape->record(out, [txs, to, B, Ctot, HW]() mutable {
      const double* g = to.grad().data();
      int64_t coff2 = 0;
      for (const Tensor& t : txs) {
        const int64_t C = t.dim(1);
        if (t.requires_grad()) {
          double* gx = const_cast<Tensor&>(t).grad().data();
          for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
              double* ic = gx + (b * C + c) * HW;
              const double* gc = g + (b * Ctot + coff2 + c) * HW;
              for (int64_t p = 0; p < HW; ++p) ic[p] += gc[p];
            }
        }
        coff2 += C;
      }
    });
  }
  return out;
}

Tensor slice_batch(Tape* tape, const Tensor& x, int64_t b0, int64_t b1) {
  if (x.ndim() < 1 || b0 < 0 || b1 <= b0 || b1 > x.dim(0))
    fail_shape("slice_batch", "invalid batch range", x.shape());
  const int64_t per = x.numel() / x.dim(0);
  const int64_t Bs = b1 - b0;
  Shape out_shape = x.shape();
  out_shape[0] = Bs;
  auto fwd = [b0, Bs, per](const double* in, double* out) {
    const double* src = in + b0 * per;
    for (int64_t i = 0; i < Bs * per; ++i) out[i] = src[i];
  };
  auto bwd = [b0, Bs, per](const double* g, double* gx) {
    double* dst = gx + b0 * per;
    for (int64_t i = 0; i < Bs * per; ++i) dst[i] += g[i];
  };
  return permutation_op(tape, x, std::move(out_shape), fwd, bwd);
}

Tensor spatial_to_heads(Tape* tape, const Tensor& x, int heads) {
  if (x.ndim() != 4) fail_shape("spatial_to_heads", "expected NCHW", x.shape());
  const int64_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3);
  if (heads <= 0 || C % heads != 0)
    fail_shape("spatial_to_heads", "channels not divisible by heads",
               x.shape());
  const int64_t Hh = heads, Dh = C / heads;
  auto fwd = [B, C, N, Hh, Dh](const double* in, double* out) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < Hh; ++h)
        for (int64_t e = 0; e < Dh; ++e) {
          const double* ic = in + (b * C + h * Dh + e) * N;
          double* oc = out + ((b * Hh + h) * N) * Dh + e;
          for (int64_t n = 0; n < N; ++n) oc[n * Dh] = ic[n];
        }
  };
  auto bwd = [B, C, N, Hh, Dh](const double* g, double* gx) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < Hh; ++h)
        for (int64_t e = 0; e < Dh; ++e) {
          double* ic = gx + (b * C + h * Dh + e) * N;
          const double* gc = g + ((b * Hh + h) * N) * Dh + e;
          for (int64_t n = 0; n < N; ++n) ic[n] += gc[n * Dh];
        }
  };
  return permutation_op(tape, x, {B, Hh, N, Dh}, fwd, bwd);
}

Tensor heads_to_spatial(Tape* tape, const Tensor& x, int64_t H, int64_t W) {
  if (x.ndim() != 4 || x.dim(2) != H * W)
    fail_shape("heads_to_spatial", "expected [B,h,H*W,dh]", x.shape());
  const int64_t B = x.dim(0), Hh = x.dim(1), N = x.dim(2), Dh = x.dim(3);
  const int64_t C = Hh * Dh;
  auto fwd = [B, C, N, Hh, Dh](const double* in, double* out) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < Hh; ++h)
        for (int64_t e = 0; e < Dh; ++e) {
          double* oc = out + (b * C + h * Dh + e) * N;
          const double* ic = in + ((b * Hh + h) * N) * Dh + e;
          for (int64_t n = 0; n < N; ++n) oc[n] = ic[n * Dh];
        }
  };
  auto bwd = [B, C, N, Hh, Dh](const double* g, double* gx) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < Hh; ++h)
        for (int64_t e = 0; e < Dh; ++e) {
          const double* gc = g + (b * C + h * Dh + e) * N;
          double* ic = gx + ((b * Hh + h) * N) * Dh + e;
          for (int64_t n = 0; n < N; ++n) ic[n * Dh] += gc[n];
        }
  };
  return permutation_op(tape, x, {B, C, H, W}, fwd, bwd);
}

}  // namespace gmx::ops
