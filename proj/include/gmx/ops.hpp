#pragma once

#include <vector>

#include "gmx/tape.hpp"
#include "gmx/tensor.hpp"

namespace gmx::ops {

// Every op takes the tape first; pass nullptr for forward-only evaluation.
// Inputs are never aliased into outputs.

// ---- elementwise / reductions ----
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& x, double c);
Tensor add_scalar(Tape* tape, const Tensor& x, double c);
Tensor sum(Tape* tape, const Tensor& x);
Tensor mean_all(Tape* tape, const Tensor& x);

// ---- dense algebra ----
// a: [M,K], b: [K,N] -> [M,N]
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
// x: [..., Din], w: [Din, Dout], b: [Dout] (b may be undefined for no bias)
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);

// ---- nonlinearities / normalization ----
// numerically stable (max subtraction), normalizes along `axis`
Tensor softmax(Tape* tape, const Tensor& x, int axis);
// normalizes along `axis`; gamma/beta have length shape[axis]; biased variance
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, int axis, double eps = 1e-6);
Tensor hardswish(Tape* tape, const Tensor& x);
Tensor gelu(Tape* tape, const Tensor& x);

// ---- convolutions (NCHW) ----
// k: [C,kh,kw], odd kernel, stride 1, zero pad (k-1)/2; bias [C] optional
Tensor conv2d_depthwise(Tape* tape, const Tensor& x, const Tensor& k,
                        const Tensor& bias);
// k: [C,3,3], stride 2, pad 1, Hout = ceil(H/2)
Tensor conv2d_depthwise_strided2(Tape* tape, const Tensor& x, const Tensor& k,
                                 const Tensor& bias);
// w: [Cout,Cin], 1x1
Tensor conv2d_pointwise(Tape* tape, const Tensor& x, const Tensor& w,
                        const Tensor& bias);
// w: [Cout,Cin,3,3], stride in {1,2}, pad 1, Hout = ceil(H/stride)
Tensor conv2d_strided(Tape* tape, const Tensor& x, const Tensor& w,
                      const Tensor& bias, int stride);

// ---- pooling ----
enum class PoolKind { min, max, avg };
// odd kernel, stride 1, zero-pad positions excluded (avg divides by the
// number of valid taps; min/max ignore padding)
Tensor pool2d(Tape* tape, const Tensor& x, PoolKind kind, int kernel);
// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(Tape* tape, const Tensor& x);
// [B,N,D] -> [B,D]
Tensor mean_tokens(Tape* tape, const Tensor& x);

// ---- loss ----
// logits: [B,C]; mean negative log-likelihood via log-sum-exp
Tensor cross_entropy(Tape* tape, const Tensor& logits,
                     const std::vector<int>& labels);

// ---- layout (pure index permutations) ----
// [B,N,D] -> [B,D,H,W] with N = H*W
Tensor tokens_to_spatial(Tape* tape, const Tensor& x, int64_t H, int64_t W);
// [B,D,H,W] -> [B,N,D]
Tensor spatial_to_tokens(Tape* tape, const Tensor& x);
// [B,N,3D] -> [3B,D,H,W]; rows [0,B) hold Q, [B,2B) K, [2B,3B) V
Tensor qkv_stack(Tape* tape, const Tensor& x, int64_t H, int64_t W);
// [3B,s,H,W] -> [B,3s,H,W]; output channel t*s+c is third t of channel c
Tensor qkv_regroup(Tape* tape, const Tensor& x);
// [B,3s,H,W] -> [B,s,H,W], mean over the three thirds
Tensor mean_channel_groups(Tape* tape, const Tensor& x);
Tensor slice_channels(Tape* tape, const Tensor& x, int64_t c0, int64_t c1);
Tensor concat_channels(Tape* tape, const std::vector<Tensor>& xs);
Tensor slice_batch(Tape* tape, const Tensor& x, int64_t b0, int64_t b1);
// [B,C,H,W] -> [B,h,N,dh] with channel c = head*dh + e, token n = i*W + j
Tensor spatial_to_heads(Tape* tape, const Tensor& x, int heads);
Tensor heads_to_spatial(Tape* tape, const Tensor& x, int64_t H, int64_t W);

// ---- attention ----
// q,k,v: [B,h,N,dh]. Default: out = scale * q @ (softmax_N(k)^T @ v).
// softmax_on_context instead applies softmax over the last axis of the
// raw dh x dh context k^T @ v.
Tensor factorized_attention(Tape* tape, const Tensor& q, const Tensor& k,
                            const Tensor& v, double scale,
                            bool softmax_on_context = false);
// out = softmax_row(scale * q @ k^T) @ v
Tensor vanilla_attention(Tape* tape, const Tensor& q, const Tensor& k,
                         const Tensor& v, double scale);

// ---- stochastic depth ----
// training: x + residual * mask_b / (1-p), mask_b ~ Bernoulli(1-p) per
// sample; eval: x + residual. rng may be null when p == 0 or !training.
Tensor drop_path(Tape* tape, const Tensor& x, const Tensor& residual,
                 double drop_prob, bool training, Rng* rng);

}  // namespace gmx::ops
