#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gmx/backbone.hpp"

namespace gmx {

// Cost convention: 1 multiply-add = 1 FLOP. Norms, activations, softmax,
// pooling and GAP count as zero; biases are excluded.
struct CostRow {
  std::string path;
  int64_t params = 0;
  int64_t flops = 0;
};

struct CostReport {
  int64_t params = 0;
  int64_t flops = 0;
  std::vector<CostRow> rows;

  void add(std::string path, int64_t p, int64_t f);
  std::string to_csv() const;  // header path,params,flops; final total row
};

// Analytic parameter and MAC accounting per module path for one forward
// pass of `batch` images at H x W. Requires H, W divisible by 32.
CostReport estimate_cost(const ModelConfig& cfg, int64_t H, int64_t W,
                         int64_t batch = 1);

// Exact count over the built model's parameter store.
int64_t count_params(const Model& m);

// Breakdown row that owns a given parameter tensor (drops the final
// name component): "stage0.block1.ffn.w1" -> "stage0.block1.ffn".
std::string row_for_param(const std::string& param_name);

// ---- ablation variants ----
struct AblationVariant {
  std::string name;
  std::string base = "T";
  // slot 0 = non-attention aggregator, 1-3 = pre-attention aggregators
  std::array<bool, 4> toggles{true, true, true, true};
  AggKind kind = AggKind::dwconv;
  std::array<std::array<int, 3>, 4> kernels{
      {{3, 5, 7}, {3, 5, 7}, {3, 5, 7}, {3, 5, 7}}};
};

ModelConfig make_ablation_variant(const AblationVariant& v);

// Every structural row of the aggregator-toggle, implementation and
// kernel-plan studies, as buildable variants.
std::vector<AblationVariant> ablation_grid(const std::string& base);

// ---- attention micro-benchmark ----
int64_t attention_macs(bool factorized, int64_t n, int heads, int64_t d_head);

struct BenchPoint {
  int64_t n = 0;
  double wall_ms = 0.0;  // median over reps
  int64_t macs = 0;
};

struct BenchResult {
  std::vector<BenchPoint> factorized;
  std::vector<BenchPoint> vanilla;
  double slope_factorized = 0.0;  // log-log wall-time fit
  double slope_vanilla = 0.0;
  double mac_slope_factorized = 0.0;
  double mac_slope_vanilla = 0.0;
  std::string to_csv() const;  // mechanism,n,wall_ms,macs
};

// reps >= 3; one unmeasured warm-up per size; short runs are auto-repeated
// until the timed span is long enough to trust.
BenchResult bench_attention(const std::vector<int64_t>& n_list, int heads,
                            int64_t d_head, int reps, uint64_t seed);

double fit_loglog_slope(const std::vector<std::pair<double, double>>& xy);

}  // namespace gmx
