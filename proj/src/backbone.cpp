#include "gmx/backbone.hpp"

#include <cmath>

#include "gmx/error.hpp"
#include "gmx/ops.hpp"

namespace gmx {

namespace op = gmx::ops;

namespace {

struct PresetRow {
  const char* name;
  int64_t dims[4];
  double ratios[4];
  int depths[4];
  double drop_path;
};

// D / R / L per stage and terminal stochastic-depth rate
const PresetRow kPresets[] = {
    {"M", {40, 80, 160, 160}, {4, 4, 4, 4}, {3, 3, 12, 4}, 0.0},
    {"T", {80, 160, 200, 240}, {4, 4, 4, 4}, {4, 4, 12, 4}, 0.1},
    {"S", {80, 160, 320, 320}, {4, 4, 4, 4}, {2, 4, 12, 4}, 0.2},
    {"B", {200, 240, 320, 480}, {2, 2, 4, 4}, {8, 8, 12, 8}, 0.4},
    {"L", {240, 320, 360, 480}, {4, 4, 2, 2}, {8, 10, 30, 10}, 0.5},
};

Tensor init_weight(ParamStore& store, const std::string& name, Shape shape,
                   uint64_t seed) {
  Rng rng = Rng::from_name(seed, name);
  const double std = Tensor::xavier_std(shape);
  return store.add(name, Tensor::trunc_normal(std::move(shape), rng, std));
}

Tensor init_zeros(ParamStore& store, const std::string& name, Shape shape) {
  return store.add(name, Tensor::zeros(std::move(shape)));
}

NormParams make_norm(ParamStore& store, const std::string& prefix, int64_t c) {
  return {store.add(prefix + ".g", Tensor::full({c}, 1.0)),
          init_zeros(store, prefix + ".b", {c})};
}

Tensor norm_act_channels(Tape* tape, const Tensor& x, const NormParams& n) {
  return op::hardswish(tape, op::layer_norm(tape, x, n.g, n.b, 1));
}

}  // namespace

ModelConfig ModelConfig::preset(const std::string& name) {
  for (const PresetRow& row : kPresets) {
    if (name != row.name) continue;
    ModelConfig cfg;
    for (int i = 0; i < 4; ++i)
      cfg.stages[i] = {row.dims[i], row.ratios[i], row.depths[i], 8};
    cfg.drop_path_rate = row.drop_path;
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected M, T, S, B, L)");
}

bool ModelConfig::is_preset_name(const std::string& name) {
  for (const PresetRow& row : kPresets)
    if (name == row.name) return true;
  return false;
}

const std::vector<std::string>& ModelConfig::preset_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const PresetRow& row : kPresets) n.push_back(row.name);
    return n;
  }();
  return names;
}

GmaConfig ModelConfig::gma_for_stage(int stage) const {
  const StageConfig& sc = stages[static_cast<size_t>(stage)];
  GmaConfig g;
  g.dim = sc.dim;
  g.heads = sc.heads;
  g.softmax_on_context = softmax_on_context;
  g.pre_attention[0] = AggregatorSpec::identity();
  for (int j = 1; j < 4; ++j) {
    if (!branches.enabled[static_cast<size_t>(j)]) {
      g.pre_attention[static_cast<size_t>(j)] = AggregatorSpec::identity();
      continue;
    }
    AggregatorSpec spec;
    spec.kind = branches.kind;
    spec.kernel = branches.kernels[static_cast<size_t>(stage)]
                                  [static_cast<size_t>(j - 1)];
    spec.followed_by_pointwise = branches.kind == AggKind::dwconv;
    g.pre_attention[static_cast<size_t>(j)] = spec;
  }
  if (branches.enabled[0])
    g.non_attention = {AggKind::dwconv, branches.non_att_kernel, true};
  else
    g.non_attention = AggregatorSpec::identity();
  return g;
}

int ModelConfig::total_depth() const {
  int n = 0;
  for (const StageConfig& s : stages) n += s.depth;
  return n;
}

double ModelConfig::drop_path_for(int global_block) const {
  const int total = total_depth();
  if (total <= 1) return 0.0;
  return drop_path_rate * static_cast<double>(global_block) /
         static_cast<double>(total - 1);
}

void ModelConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = stages[static_cast<size_t>(i)];
    const std::string where = "stage " + std::to_string(i);
    if (s.depth < 1)
      throw ConfigError(where + ": depth must be >= 1, got " +
                        std::to_string(s.depth));
    if (s.ratio <= 0.0)
      throw ConfigError(where + ": ffn ratio must be positive");
    try {
      gma_for_stage(i).validate();
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  if (num_classes < 2)
    throw ConfigError("num_classes must be >= 2, got " +
                      std::to_string(num_classes));
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0)
    throw ConfigError("drop_path_rate must be in [0,1)");
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  ParamStore& st = m.store;

  const int64_t d1 = cfg.stages[0].dim;
  const int64_t mid = d1 / 2;
  m.stem.c1 = {init_weight(st, "stem.conv1.w", {mid, 3, 3, 3}, seed),
               init_zeros(st, "stem.conv1.b", {mid})};
  m.stem.n1 = make_norm(st, "stem.norm1", mid);
  m.stem.c2 = {init_weight(st, "stem.conv2.w", {d1, mid, 3, 3}, seed),
               init_zeros(st, "stem.conv2.b", {d1})};
  m.stem.n2 = make_norm(st, "stem.norm2", d1);
  m.stem.c3 = {init_weight(st, "stem.conv3.w", {d1, d1, 3, 3}, seed),
               init_zeros(st, "stem.conv3.b", {d1})};
  m.stem.n3 = make_norm(st, "stem.norm3", d1);
  m.stem.c4 = {init_weight(st, "stem.conv4.w", {d1, d1, 3, 3}, seed),
               init_zeros(st, "stem.conv4.b", {d1})};
  m.stem.n4 = make_norm(st, "stem.norm4", d1);

  int global_block = 0;
  for (int i = 0; i < 4; ++i) {
    const std::string sp = "stage" + std::to_string(i);
    StageModules& stage = m.stages[static_cast<size_t>(i)];
    const int64_t din = cfg.stages[static_cast<size_t>(i == 0 ? 0 : i - 1)].dim;
    const int64_t dout = cfg.stages[static_cast<size_t>(i)].dim;
    if (i > 0) {
      Embed2xParams e;
      e.dw_k = init_weight(st, sp + ".embed.dw.k", {din, 3, 3}, seed);
      e.dw_b = init_zeros(st, sp + ".embed.dw.b", {din});
      e.pw_w = init_weight(st, sp + ".embed.pw.w", {dout, din}, seed);
      e.pw_b = init_zeros(st, sp + ".embed.pw.b", {dout});
      e.norm = make_norm(st, sp + ".embed.norm", dout);
      stage.embed = std::move(e);
    }
    const GmaConfig gcfg = cfg.gma_for_stage(i);
    const StageConfig& sc = cfg.stages[static_cast<size_t>(i)];
    const int64_t hidden = std::llround(sc.ratio * static_cast<double>(sc.dim));
    for (int j = 0; j < sc.depth; ++j) {
      const std::string bp = sp + ".block" + std::to_string(j);
      BlockParams blk;
      blk.ln1 = make_norm(st, bp + ".ln1", sc.dim);
      blk.gma = make_gma_params(gcfg, st, bp + ".gma", seed);
      blk.ln2 = make_norm(st, bp + ".ln2", sc.dim);
      blk.ffn.w1 = init_weight(st, bp + ".ffn.w1", {sc.dim, hidden}, seed);
      blk.ffn.b1 = init_zeros(st, bp + ".ffn.b1", {hidden});
      blk.ffn.w2 = init_weight(st, bp + ".ffn.w2", {hidden, sc.dim}, seed);
      blk.ffn.b2 = init_zeros(st, bp + ".ffn.b2", {sc.dim});
      blk.drop_path = cfg.drop_path_for(global_block++);
      stage.blocks.push_back(std::move(blk));
    }
  }

  const int64_t d4 = cfg.stages[3].dim;
  m.head_norm = make_norm(st, "head.norm", d4);
  m.head_w = init_weight(st, "head.linear.w", {d4, cfg.num_classes}, seed);
  m.head_b = init_zeros(st, "head.linear.b", {cfg.num_classes});
  return m;
}

Tensor patch_embed_4x(Tape* tape, const Embed4xParams& p, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != 3)
    fail_shape("patch_embed_4x", "expected [B,3,H,W]", x.shape());
  if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
    throw ConfigError("patch_embed_4x: H and W must be divisible by 4, got " +
                      shape_str(x.shape()));
  Tensor y = op::conv2d_strided(tape, x, p.c1.w, p.c1.b, 2);
  y = norm_act_channels(tape, y, p.n1);
  y = op::conv2d_strided(tape, y, p.c2.w, p.c2.b, 2);
  y = norm_act_channels(tape, y, p.n2);
  y = op::conv2d_strided(tape, y, p.c3.w, p.c3.b, 1);
  y = norm_act_channels(tape, y, p.n3);
  y = op::conv2d_strided(tape, y, p.c4.w, p.c4.b, 1);
  return norm_act_channels(tape, y, p.n4);
}

Tensor patch_embed_2x(Tape* tape, const Embed2xParams& p, const Tensor& x) {
  if (x.ndim() != 4) fail_shape("patch_embed_2x", "expected 4d", x.shape());
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw ConfigError("patch_embed_2x: H and W must be even, got " +
                      shape_str(x.shape()));
  Tensor y = op::conv2d_depthwise_strided2(tape, x, p.dw_k, p.dw_b);
  y = op::conv2d_pointwise(tape, y, p.pw_w, p.pw_b);
  return op::layer_norm(tape, y, p.norm.g, p.norm.b, 1);
}

Tensor ffn_forward(Tape* tape, const FfnParams& p, const Tensor& x) {
  Tensor h = op::gelu(tape, op::linear(tape, x, p.w1, p.b1));
  return op::linear(tape, h, p.w2, p.b2);
}

Tensor encoder_block_forward(Tape* tape, const GmaConfig& cfg,
                             const BlockParams& p, const Tensor& x, int64_t H,
                             int64_t W, bool training, Rng* drop_rng) {
  Tensor h1 = op::layer_norm(tape, x, p.ln1.g, p.ln1.b, 2);
  Tensor g = gma_forward(tape, cfg, p.gma, h1, H, W);
  Tensor y = op::drop_path(tape, x, g, p.drop_path, training, drop_rng);
  Tensor h2 = op::layer_norm(tape, y, p.ln2.g, p.ln2.b, 2);
  Tensor f = ffn_forward(tape, p.ffn, h2);
  return op::drop_path(tape, y, f, p.drop_path, training, drop_rng);
}

ModelOutput model_forward(Tape* tape, const Model& m, const Tensor& images,
                          bool training, Rng* drop_rng) {
  if (images.ndim() != 4 || images.dim(1) != 3)
    fail_shape("model_forward", "expected [B,3,H,W]", images.shape());
  if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0)
    throw ConfigError("model_forward: H and W must be divisible by 32, got " +
                      shape_str(images.shape()));

  ModelOutput out;
  Tensor x = patch_embed_4x(tape, m.stem, images);
  Tensor tokens;
  for (int i = 0; i < 4; ++i) {
    const StageModules& stage = m.stages[static_cast<size_t>(i)];
    if (stage.embed) x = patch_embed_2x(tape, *stage.embed, x);
    const int64_t H = x.dim(2), W = x.dim(3);
    tokens = op::spatial_to_tokens(tape, x);
    const GmaConfig gcfg = m.cfg.gma_for_stage(i);
    for (const BlockParams& blk : stage.blocks)
      tokens =
          encoder_block_forward(tape, gcfg, blk, tokens, H, W, training, drop_rng);
    x = op::tokens_to_spatial(tape, tokens, H, W);
    out.features[static_cast<size_t>(i)] = x;
  }

  Tensor normed =
      op::layer_norm(tape, tokens, m.head_norm.g, m.head_norm.b, 2);
  Tensor pooled = op::mean_tokens(tape, normed);
  out.logits = op::linear(tape, pooled, m.head_w, m.head_b);
  return out;
}

}  // namespace gmx
