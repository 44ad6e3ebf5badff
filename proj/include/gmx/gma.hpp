#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "gmx/ops.hpp"
#include "gmx/param_store.hpp"
#include "gmx/tape.hpp"
#include "gmx/tensor.hpp"

namespace gmx {

enum class AggKind { identity, dwconv, minpool, maxpool, avgpool };

const char* agg_kind_name(AggKind k);
AggKind agg_kind_from_name(const std::string& name);

struct AggregatorSpec {
  AggKind kind = AggKind::dwconv;
  int kernel = 3;
  bool followed_by_pointwise = true;

  static AggregatorSpec identity() { return {AggKind::identity, 1, false}; }
  bool is_identity() const { return kind == AggKind::identity; }
  void validate(const std::string& where) const;
};

struct GmaConfig {
  int64_t dim = 0;
  int heads = 8;
  // branch 0 identity, branches 1-3 sliding-window aggregators
  std::array<AggregatorSpec, 4> pre_attention{
      AggregatorSpec::identity(), AggregatorSpec{AggKind::dwconv, 3, true},
      AggregatorSpec{AggKind::dwconv, 5, true},
      AggregatorSpec{AggKind::dwconv, 7, true}};
  AggregatorSpec non_attention{AggKind::dwconv, 3, true};
  bool softmax_on_context = false;

  int64_t seg() const { return dim / 5; }
  int64_t attn_channels() const { return 4 * seg(); }
  int64_t head_dim() const { return attn_channels() / heads; }
  double scale() const {
    return 1.0 / std::sqrt(static_cast<double>(head_dim()));
  }
  void validate() const;
};

// Parameters for one aggregator branch; tensors are defined only where the
// spec calls for them (identity branches carry just the norm affine).
struct BranchParams {
  Tensor dw_k, dw_b;      // depthwise kernel [C,k,k] + bias [C]
  Tensor pw_w, pw_b;      // pointwise [Cout,Cin] + bias
  Tensor norm_g, norm_b;  // channel LayerNorm affine [s]
};

struct GmaParams {
  Tensor qkv_w, qkv_b;               // [D,3D], [3D]
  std::array<BranchParams, 4> pre;   // per pre-attention branch
  BranchParams non_att;
  Tensor ens_w, ens_b;               // token ensemble linear [D,D], [D]
  Tensor ens_norm_g, ens_norm_b;     // ensemble LayerNorm affine [D]
};

GmaParams make_gma_params(const GmaConfig& cfg, ParamStore& store,
                          const std::string& prefix, uint64_t seed);

// Test hooks: skip_norm drops the LayerNorm (keeps activation), skip_norm_act
// returns the raw aggregator output. Production paths always use `full`.
enum class NormActMode { full, skip_norm, skip_norm_act };

// seg: [3B,s,H,W] -> [3B,s,H,W]; aggregator -> channel LayerNorm -> HardSwish
Tensor aggregate_pre_attention(Tape* tape, const AggregatorSpec& spec,
                               const BranchParams& p, const Tensor& seg,
                               NormActMode mode = NormActMode::full);

// seg: fifth segment [3B,s,H,W]; regroups Q/K/V thirds into [B,3s,H,W],
// reduces 3s->s, then norm+act -> [B,s,H,W]
Tensor aggregate_non_attention(Tape* tape, const AggregatorSpec& spec,
                               const BranchParams& p, const Tensor& seg,
                               NormActMode mode = NormActMode::full);

// stacked branches [3B,4s,H,W] -> multi-head factorized attention -> [B,4s,H,W]
Tensor gma_attention(Tape* tape, const GmaConfig& cfg, const Tensor& stacked);

// x: [B,N,D] mixed tokens -> linear D->D -> LayerNorm -> HardSwish
Tensor token_ensemble(Tape* tape, const GmaParams& p, const Tensor& x,
                      NormActMode mode = NormActMode::full);

// Full block: [B,N,D] -> [B,N,D] with N == H*W
Tensor gma_forward(Tape* tape, const GmaConfig& cfg, const GmaParams& p,
                   const Tensor& x, int64_t H, int64_t W,
                   NormActMode mode = NormActMode::full);

}  // namespace gmx
