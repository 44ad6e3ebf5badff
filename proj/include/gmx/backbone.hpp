#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "gmx/gma.hpp"
#include "gmx/param_store.hpp"

namespace gmx {

struct StageConfig {
  int64_t dim = 0;
  double ratio = 4.0;
  int depth = 0;
  int heads = 8;
};

// Which aggregators are active and how they are implemented. Slot 0 is the
// non-attention branch aggregator, slots 1-3 the pre-attention aggregators
// (kernel sizes 3/5/7 by default). Disabled slots fall back to identity.
struct BranchPlan {
  std::array<bool, 4> enabled{true, true, true, true};
  AggKind kind = AggKind::dwconv;  // implementation of pre-attention slots
  std::array<std::array<int, 3>, 4> kernels{
      {{3, 5, 7}, {3, 5, 7}, {3, 5, 7}, {3, 5, 7}}};  // per stage
  int non_att_kernel = 3;
};

struct ModelConfig {
  std::array<StageConfig, 4> stages{};
  int64_t num_classes = 1000;
  double drop_path_rate = 0.0;
  bool softmax_on_context = false;
  BranchPlan branches;

  static ModelConfig preset(const std::string& name);  // M T S B L
  static bool is_preset_name(const std::string& name);
  static const std::vector<std::string>& preset_names();

  GmaConfig gma_for_stage(int stage) const;
  int total_depth() const;
  // linear stochastic-depth ramp from 0 to drop_path_rate over all blocks
  double drop_path_for(int global_block) const;
  void validate() const;
};

struct NormParams {
  Tensor g, b;
};

struct ConvParams {
  Tensor w, b;  // dense 3x3: w [Cout,Cin,3,3]
};

struct Embed4xParams {
  ConvParams c1, c2, c3, c4;
  NormParams n1, n2, n3, n4;
};

struct Embed2xParams {
  Tensor dw_k, dw_b;  // [Din,3,3] stride 2
  Tensor pw_w, pw_b;  // [Dout,Din]
  NormParams norm;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct BlockParams {
  NormParams ln1, ln2;
  GmaParams gma;
  FfnParams ffn;
  double drop_path = 0.0;
};

struct StageModules {
  std::optional<Embed2xParams> embed;  // absent for stage 0
  std::vector<BlockParams> blocks;
};

struct Model {
  ModelConfig cfg;
  ParamStore store;
  Embed4xParams stem;
  std::array<StageModules, 4> stages;
  NormParams head_norm;
  Tensor head_w, head_b;
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

struct ModelOutput {
  Tensor logits;                  // [B,num_classes]
  std::array<Tensor, 4> features; // [B,D_i,H/2^{i+2},W/2^{i+2}]
};

ModelOutput model_forward(Tape* tape, const Model& m, const Tensor& images,
                          bool training = false, Rng* drop_rng = nullptr);

// exposed for unit tests
Tensor patch_embed_4x(Tape* tape, const Embed4xParams& p, const Tensor& x);
Tensor patch_embed_2x(Tape* tape, const Embed2xParams& p, const Tensor& x);
Tensor ffn_forward(Tape* tape, const FfnParams& p, const Tensor& x);
Tensor encoder_block_forward(Tape* tape, const GmaConfig& cfg,
                             const BlockParams& p, const Tensor& x, int64_t H,
                             int64_t W, bool training, Rng* drop_rng);

}  // namespace gmx
