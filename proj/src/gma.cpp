#include "gmx/gma.hpp"

#include "gmx/error.hpp"

namespace gmx {

namespace op = gmx::ops;

const char* agg_kind_name(AggKind k) {
  switch (k) {
    case AggKind::identity: return "identity";
    case AggKind::dwconv: return "dwconv";
    case AggKind::minpool: return "minpool";
    case AggKind::maxpool: return "maxpool";
    case AggKind::avgpool: return "avgpool";
  }
  return "?";
}

AggKind agg_kind_from_name(const std::string& name) {
  for (AggKind k : {AggKind::identity, AggKind::dwconv, AggKind::minpool,
                    AggKind::maxpool, AggKind::avgpool})
    if (name == agg_kind_name(k)) return k;
  throw ConfigError("unknown aggregator kind '" + name + "'");
}

void AggregatorSpec::validate(const std::string& where) const {
  const bool id = kind == AggKind::identity;
  if (id != (kernel == 1))
    throw ConfigError(where + ": identity aggregator <=> kernel 1 (got kind " +
                      agg_kind_name(kind) + ", kernel " +
                      std::to_string(kernel) + ")");
  if (kernel != 1 && kernel != 3 && kernel != 5 && kernel != 7 && kernel != 9)
    throw ConfigError(where + ": kernel must be one of {1,3,5,7,9}, got " +
                      std::to_string(kernel));
  if (id && followed_by_pointwise)
    throw ConfigError(where + ": identity aggregator takes no pointwise map");
}

void GmaConfig::validate() const {
  if (dim <= 0 || dim % 5 != 0)
    throw ConfigError("gma: dim must be positive and divisible by 5, got " +
                      std::to_string(dim));
  if (heads <= 0 || attn_channels() % heads != 0)
    throw ConfigError("gma: heads must divide 4*dim/5 (" +
                      std::to_string(attn_channels()) + "), got " +
                      std::to_string(heads));
  for (size_t i = 0; i < pre_attention.size(); ++i)
    pre_attention[i].validate("gma branch " + std::to_string(i));
  non_attention.validate("gma non-attention branch");
  if (!non_attention.is_identity() && !non_attention.followed_by_pointwise)
    throw ConfigError(
        "gma non-attention branch: 3s->s reduction requires the pointwise "
        "map for non-identity aggregators");
}

namespace {

Tensor init_weight(ParamStore& store, const std::string& name, Shape shape,
                   uint64_t seed) {
  Rng rng = Rng::from_name(seed, name);
  const double std = Tensor::xavier_std(shape);
  return store.add(name, Tensor::trunc_normal(std::move(shape), rng, std));
}

Tensor init_zeros(ParamStore& store, const std::string& name, Shape shape) {
  return store.add(name, Tensor::zeros(std::move(shape)));
}

Tensor init_ones(ParamStore& store, const std::string& name, Shape shape) {
  return store.add(name, Tensor::full(std::move(shape), 1.0));
}

BranchParams make_branch(const AggregatorSpec& spec, ParamStore& store,
                         const std::string& prefix, uint64_t seed, int64_t s,
                         bool non_att) {
  BranchParams bp;
  const int64_t cin = non_att ? 3 * s : s;
  if (spec.kind == AggKind::dwconv) {
    bp.dw_k = init_weight(store, prefix + ".dw.k", {cin, spec.kernel, spec.kernel},
                          seed);
    bp.dw_b = init_zeros(store, prefix + ".dw.b", {cin});
  }
  if (spec.followed_by_pointwise) {
    bp.pw_w = init_weight(store, prefix + ".pw.w", {s, cin}, seed);
    bp.pw_b = init_zeros(store, prefix + ".pw.b", {s});
  }
  bp.norm_g = init_ones(store, prefix + ".norm.g", {s});
  bp.norm_b = init_zeros(store, prefix + ".norm.b", {s});
  return bp;
}

Tensor norm_act(Tape* tape, const Tensor& x, const Tensor& g, const Tensor& b,
                int axis, NormActMode mode) {
  if (mode == NormActMode::skip_norm_act) return x;
  Tensor y = x;
  if (mode == NormActMode::full) y = op::layer_norm(tape, y, g, b, axis);
  return op::hardswish(tape, y);
}

}  // namespace

GmaParams make_gma_params(const GmaConfig& cfg, ParamStore& store,
                          const std::string& prefix, uint64_t seed) {
  cfg.validate();
  const int64_t D = cfg.dim, s = cfg.seg();
  GmaParams p;
  p.qkv_w = init_weight(store, prefix + ".qkv.w", {D, 3 * D}, seed);
  p.qkv_b = init_zeros(store, prefix + ".qkv.b", {3 * D});
  for (int i = 0; i < 4; ++i)
    p.pre[i] = make_branch(cfg.pre_attention[i], store,
                           prefix + ".branch" + std::to_string(i), seed, s,
                           false);
  p.non_att = make_branch(cfg.non_attention, store, prefix + ".nonatt", seed,
                          s, true);
  p.ens_w = init_weight(store, prefix + ".ensemble.lin.w", {D, D}, seed);
  p.ens_b = init_zeros(store, prefix + ".ensemble.lin.b", {D});
  p.ens_norm_g = init_ones(store, prefix + ".ensemble.norm.g", {D});
  p.ens_norm_b = init_zeros(store, prefix + ".ensemble.norm.b", {D});
  return p;
}

Tensor aggregate_pre_attention(Tape* tape, const AggregatorSpec& spec,
                               const BranchParams& p, const Tensor& seg,
                               NormActMode mode) {
  Tensor y = seg;
  switch (spec.kind) {
    case AggKind::identity:
      break;
    case AggKind::dwconv:
      y = op::conv2d_depthwise(tape, y, p.dw_k, p.dw_b);
      break;
    case AggKind::minpool:
      y = op::pool2d(tape, y, op::PoolKind::min, spec.kernel);
      break;
    case AggKind::maxpool:
      y = op::pool2d(tape, y, op::PoolKind::max, spec.kernel);
      break;
    case AggKind::avgpool:
      y = op::pool2d(tape, y, op::PoolKind::avg, spec.kernel);
      break;
  }
  if (spec.followed_by_pointwise) y = op::conv2d_pointwise(tape, y, p.pw_w, p.pw_b);
  return norm_act(tape, y, p.norm_g, p.norm_b, 1, mode);
}

Tensor aggregate_non_attention(Tape* tape, const AggregatorSpec& spec,
                               const BranchParams& p, const Tensor& seg,
                               NormActMode mode) {
  Tensor grouped = op::qkv_regroup(tape, seg);
  Tensor y;
  if (spec.is_identity()) {
    y = op::mean_channel_groups(tape, grouped);
  } else {
    switch (spec.kind) {
      case AggKind::dwconv:
        y = op::conv2d_depthwise(tape, grouped, p.dw_k, p.dw_b);
        break;
      case AggKind::minpool:
        y = op::pool2d(tape, grouped, op::PoolKind::min, spec.kernel);
        break;
      case AggKind::maxpool:
        y = op::pool2d(tape, grouped, op::PoolKind::max, spec.kernel);
        break;
      case AggKind::avgpool:
        y = op::pool2d(tape, grouped, op::PoolKind::avg, spec.kernel);
        break;
      default:
        break;
    }
    y = op::conv2d_pointwise(tape, y, p.pw_w, p.pw_b);
  }
  return norm_act(tape, y, p.norm_g, p.norm_b, 1, mode);
}

Tensor gma_attention(Tape* tape, const GmaConfig& cfg, const Tensor& stacked) {
  if (stacked.ndim() != 4 || stacked.dim(0) % 3 != 0 ||
      stacked.dim(1) != cfg.attn_channels())
    fail_shape("gma_attention", "expected [3B,4D/5,H,W]", stacked.shape());
  const int64_t B = stacked.dim(0) / 3;
  const int64_t H = stacked.dim(2), W = stacked.dim(3);
  Tensor q = op::slice_batch(tape, stacked, 0, B);
  Tensor k = op::slice_batch(tape, stacked, B, 2 * B);
  Tensor v = op::slice_batch(tape, stacked, 2 * B, 3 * B);
  Tensor qh = op::spatial_to_heads(tape, q, cfg.heads);
  Tensor kh = op::spatial_to_heads(tape, k, cfg.heads);
  Tensor vh = op::spatial_to_heads(tape, v, cfg.heads);
  Tensor oh = op::factorized_attention(tape, qh, kh, vh, cfg.scale(),
                                       cfg.softmax_on_context);
  return op::heads_to_spatial(tape, oh, H, W);
}

Tensor token_ensemble(Tape* tape, const GmaParams& p, const Tensor& x,
                      NormActMode mode) {
  Tensor y = op::linear(tape, x, p.ens_w, p.ens_b);
  return norm_act(tape, y, p.ens_norm_g, p.ens_norm_b, 2, mode);
}

Tensor gma_forward(Tape* tape, const GmaConfig& cfg, const GmaParams& p,
                   const Tensor& x, int64_t H, int64_t W, NormActMode mode) {
  if (x.ndim() != 3 || x.dim(1) != H * W || x.dim(2) != cfg.dim)
    fail_shape("gma_forward", "expected [B,H*W,D]", x.shape());
  const int64_t s = cfg.seg();

  Tensor qkv = op::linear(tape, x, p.qkv_w, p.qkv_b);
  Tensor sp = op::qkv_stack(tape, qkv, H, W);

  std::vector<Tensor> branches;
  branches.reserve(4);
  for (int i = 0; i < 4; ++i) {
    Tensor seg = op::slice_channels(tape, sp, i * s, (i + 1) * s);
    branches.push_back(
        aggregate_pre_attention(tape, cfg.pre_attention[i], p.pre[i], seg, mode));
  }
  Tensor stacked = op::concat_channels(tape, branches);
  Tensor att = gma_attention(tape, cfg, stacked);

  Tensor seg4 = op::slice_channels(tape, sp, 4 * s, 5 * s);
  Tensor non_att =
      aggregate_non_attention(tape, cfg.non_attention, p.non_att, seg4, mode);

  Tensor mixed = op::concat_channels(tape, {att, non_att});
  Tensor tokens = op::spatial_to_tokens(tape, mixed);
  return token_ensemble(tape, p, tokens, mode);
}

}  // namespace gmx
