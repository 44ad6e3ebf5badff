#include "gmx/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "gmx/error.hpp"
#include "gmx/ops.hpp"

namespace gmx {

void CostReport::add(std::string path, int64_t p, int64_t f) {
  params += p;
  flops += f;
  rows.push_back({std::move(path), p, f});
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "path,params,flops\n";
  for (const CostRow& r : rows)
    os << r.path << ',' << r.params << ',' << r.flops << '\n';
  os << "total," << params << ',' << flops << '\n';
  return os.str();
}

std::string row_for_param(const std::string& param_name) {
  const size_t pos = param_name.rfind('.');
  if (pos == std::string::npos || pos == 0)
    throw ContractError("parameter name without module path: '" + param_name +
                        "'");
  return param_name.substr(0, pos);
}

int64_t count_params(const Model& m) { return m.store.total_params(); }

namespace {

void add_norm(CostReport& r, const std::string& path, int64_t c) {
  r.add(path, 2 * c, 0);
}

void add_branch(CostReport& r, const std::string& prefix,
                const AggregatorSpec& spec, int64_t s, int64_t n_positions,
                int64_t stacks, int64_t batch) {
  // pre-attention branches see Q,K,V stacks (stacks=3); the regrouped
  // non-attention branch sees one stack of 3s channels (stacks=1, cin=3s)
  const int64_t cin = stacks == 3 ? s : 3 * s;
  const int64_t reps = stacks * n_positions * batch;
  if (spec.kind == AggKind::dwconv) {
    const int64_t k2 = static_cast<int64_t>(spec.kernel) * spec.kernel;
    r.add(prefix + ".dw", cin * k2 + cin, cin * k2 * reps);
  }
  if (spec.followed_by_pointwise)
    r.add(prefix + ".pw", s * cin + s, s * cin * reps);
  add_norm(r, prefix + ".norm", s);
}

}  // namespace

CostReport estimate_cost(const ModelConfig& cfg, int64_t H, int64_t W,
                         int64_t batch) {
  cfg.validate();
  if (H % 32 != 0 || W % 32 != 0)
    throw ConfigError("estimate_cost: resolution must be divisible by 32, got " +
                      std::to_string(H) + "x" + std::to_string(W));
  if (batch < 1) throw ConfigError("estimate_cost: batch must be >= 1");

  CostReport r;
  const int64_t d1 = cfg.stages[0].dim;
  const int64_t mid = d1 / 2;
  const int64_t half = (H / 2) * (W / 2);
  const int64_t quarter = (H / 4) * (W / 4);

  r.add("stem.conv1", mid * 3 * 9 + mid, mid * 3 * 9 * half * batch);
  add_norm(r, "stem.norm1", mid);
  r.add("stem.conv2", d1 * mid * 9 + d1, d1 * mid * 9 * quarter * batch);
  add_norm(r, "stem.norm2", d1);
  r.add("stem.conv3", d1 * d1 * 9 + d1, d1 * d1 * 9 * quarter * batch);
  add_norm(r, "stem.norm3", d1);
  r.add("stem.conv4", d1 * d1 * 9 + d1, d1 * d1 * 9 * quarter * batch);
  add_norm(r, "stem.norm4", d1);

  for (int i = 0; i < 4; ++i) {
    const std::string sp = "stage" + std::to_string(i);
    const StageConfig& sc = cfg.stages[static_cast<size_t>(i)];
    const int64_t n = (H >> (i + 2)) * (W >> (i + 2));
    if (i > 0) {
      const int64_t din = cfg.stages[static_cast<size_t>(i - 1)].dim;
      r.add(sp + ".embed.dw", din * 9 + din, din * 9 * n * batch);
      r.add(sp + ".embed.pw", sc.dim * din + sc.dim, sc.dim * din * n * batch);
      add_norm(r, sp + ".embed.norm", sc.dim);
    }
    const GmaConfig g = cfg.gma_for_stage(i);
    const int64_t D = sc.dim, s = g.seg(), dh = g.head_dim();
    const int64_t hidden = std::llround(sc.ratio * static_cast<double>(D));
    for (int j = 0; j < sc.depth; ++j) {
      const std::string bp = sp + ".block" + std::to_string(j) + ".";
      add_norm(r, bp + "ln1", D);
      r.add(bp + "gma.qkv", D * 3 * D + 3 * D, D * 3 * D * n * batch);
      for (int b = 0; b < 4; ++b)
        add_branch(r, bp + "gma.branch" + std::to_string(b),
                   g.pre_attention[static_cast<size_t>(b)], s, n, 3, batch);
      add_branch(r, bp + "gma.nonatt", g.non_attention, s, n, 1, batch);
      r.add(bp + "gma.attention", 0,
            attention_macs(true, n, g.heads, dh) * batch);
      r.add(bp + "gma.ensemble.lin", D * D + D, D * D * n * batch);
      add_norm(r, bp + "gma.ensemble.norm", D);
      add_norm(r, bp + "ln2", D);
      r.add(bp + "ffn", D * hidden + hidden + hidden * D + D,
            2 * D * hidden * n * batch);
    }
  }

  const int64_t d4 = cfg.stages[3].dim;
  add_norm(r, "head.norm", d4);
  r.add("head.linear", d4 * cfg.num_classes + cfg.num_classes,
        d4 * cfg.num_classes * batch);
  return r;
}

ModelConfig make_ablation_variant(const AblationVariant& v) {
  ModelConfig cfg = ModelConfig::preset(v.base);
  cfg.branches.enabled = v.toggles;
  cfg.branches.kind = v.kind;
  cfg.branches.kernels = v.kernels;
  return cfg;
}

std::vector<AblationVariant> ablation_grid(const std::string& base) {
  std::vector<AblationVariant> grid;
  auto toggled = [&](std::string name, std::array<bool, 4> t) {
    AblationVariant v;
    v.name = std::move(name);
    v.base = base;
    v.toggles = t;
    return v;
  };
  // aggregator-toggle study rows, in table order
  grid.push_back(toggled("agg_none", {false, false, false, false}));
  grid.push_back(toggled("agg_pre_only", {false, true, true, true}));
  grid.push_back(toggled("agg_nonatt_only", {true, false, false, false}));
  grid.push_back(toggled("agg_01", {true, true, false, false}));
  grid.push_back(toggled("agg_02", {true, false, true, false}));
  grid.push_back(toggled("agg_03", {true, false, false, true}));
  grid.push_back(toggled("agg_all", {true, true, true, true}));
  // implementation study rows
  for (AggKind k : {AggKind::minpool, AggKind::maxpool, AggKind::avgpool,
                    AggKind::dwconv}) {
    AblationVariant v;
    v.name = std::string("impl_") + agg_kind_name(k);
    v.base = base;
    v.kind = k;
    grid.push_back(v);
  }
  // kernel-plan study rows
  {
    AblationVariant v;
    v.name = "kernels_579";
    v.base = base;
    v.kernels = {{{5, 7, 9}, {5, 7, 9}, {5, 7, 9}, {5, 7, 9}}};
    grid.push_back(v);
    v.name = "kernels_desc";
    v.kernels = {{{5, 7, 9}, {5, 7, 9}, {3, 5, 7}, {3, 5, 7}}};
    grid.push_back(v);
    v.name = "kernels_asc";
    v.kernels = {{{3, 5, 7}, {3, 5, 7}, {5, 7, 9}, {5, 7, 9}}};
    grid.push_back(v);
  }
  return grid;
}

int64_t attention_macs(bool factorized, int64_t n, int heads, int64_t d_head) {
  if (factorized) return 2 * n * d_head * d_head * heads;
  return 2 * n * n * d_head * heads;
}

double fit_loglog_slope(const std::vector<std::pair<double, double>>& xy) {
  if (xy.size() < 2)
    throw ContractError("fit_loglog_slope: need at least 2 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [x, y] : xy) {
    const double lx = std::log(x), ly = std::log(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double n = static_cast<double>(xy.size());
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::string BenchResult::to_csv() const {
  std::ostringstream os;
  os << "mechanism,n,wall_ms,macs\n";
  for (const BenchPoint& p : factorized)
    os << "factorized," << p.n << ',' << p.wall_ms << ',' << p.macs << '\n';
  for (const BenchPoint& p : vanilla)
    os << "vanilla," << p.n << ',' << p.wall_ms << ',' << p.macs << '\n';
  return os.str();
}

namespace {

double time_once(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

double median_wall_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm-up, unmeasured
  double first = time_once(fn);
  // repeat short runs so each sample spans at least ~20 ms of work
  int calls = 1;
  if (first < 20.0) calls = static_cast<int>(20.0 / std::max(first, 1e-3)) + 1;
  std::vector<double> samples;
  samples.reserve(static_cast<size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const double span = time_once([&] {
      for (int c = 0; c < calls; ++c) fn();
    });
    samples.push_back(span / calls);
  }
  std::sort(samples.begin(), samples.end());
  return samples[samples.size() / 2];
}

}  // namespace

BenchResult bench_attention(const std::vector<int64_t>& n_list, int heads,
                            int64_t d_head, int reps, uint64_t seed) {
  if (reps < 3) throw ConfigError("bench_attention: reps must be >= 3");
  if (n_list.size() < 2)
    throw ConfigError("bench_attention: need at least 2 sizes");
  BenchResult res;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  for (int64_t n : n_list) {
    Rng rng(seed, static_cast<uint64_t>(n));
    Tensor q = Tensor::rand_uniform({1, heads, n, d_head}, rng, -1.0, 1.0);
    Tensor k = Tensor::rand_uniform({1, heads, n, d_head}, rng, -1.0, 1.0);
    Tensor v = Tensor::rand_uniform({1, heads, n, d_head}, rng, -1.0, 1.0);
    BenchPoint pf, pv;
    pf.n = pv.n = n;
    pf.macs = attention_macs(true, n, heads, d_head);
    pv.macs = attention_macs(false, n, heads, d_head);
    pf.wall_ms = median_wall_ms(
        [&] { ops::factorized_attention(nullptr, q, k, v, scale); }, reps);
    pv.wall_ms = median_wall_ms(
        [&] { ops::vanilla_attention(nullptr, q, k, v, scale); }, reps);
    res.factorized.push_back(pf);
    res.vanilla.push_back(pv);
  }
  auto slope = [](const std::vector<BenchPoint>& pts, bool use_macs) {
    std::vector<std::pair<double, double>> xy;
    for (const BenchPoint& p : pts)
      xy.emplace_back(static_cast<double>(p.n),
                      use_macs ? static_cast<double>(p.macs) : p.wall_ms);
    return fit_loglog_slope(xy);
  };
  res.slope_factorized = slope(res.factorized, false);
  res.slope_vanilla = slope(res.vanilla, false);
  res.mac_slope_factorized = slope(res.factorized, true);
  res.mac_slope_vanilla = slope(res.vanilla, true);
  return res;
}

}  // namespace gmx
