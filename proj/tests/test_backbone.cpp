#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <functional>
#include <vector>

#include "doctest.h"
#include "gmx/analysis.hpp"
#include "gmx/backbone.hpp"
#include "gmx/error.hpp"
#include "gmx/grad_check.hpp"
#include "gmx/ops.hpp"
#include "gmx/rng.hpp"
#include "gmx/tensor.hpp"

using namespace gmx;
namespace op = gmx::ops;

namespace {

ModelConfig tiny_config(int64_t d0 = 10, int64_t d1 = 10, int64_t d2 = 10,
                        int64_t d3 = 10) {
  ModelConfig cfg;
  cfg.stages = {StageConfig{d0, 4.0, 1, 2}, StageConfig{d1, 4.0, 1, 2},
                StageConfig{d2, 4.0, 1, 2}, StageConfig{d3, 4.0, 1, 2}};
  cfg.num_classes = 2;
  cfg.drop_path_rate = 0.0;
  return cfg;
}

Tensor rand_image(int64_t B, int64_t H, int64_t W, uint64_t seed) {
  Rng rng = Rng::from_name(seed, "test.image");
  return Tensor::rand_uniform({B, 3, H, W}, rng, 0.0, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

void zero_all_params(const ParamStore& store) {
  for (const auto& e : store.entries()) {
    Tensor t = e.tensor;
    std::fill(t.data().begin(), t.data().end(), 0.0);
  }
}

}  // namespace

TEST_CASE("named presets reproduce the published stage tables") {
  CHECK(ModelConfig::preset_names() ==
        std::vector<std::string>{"M", "T", "S", "B", "L"});
  for (const auto& n : ModelConfig::preset_names())
    CHECK(ModelConfig::is_preset_name(n));
  CHECK_FALSE(ModelConfig::is_preset_name("XL"));
  CHECK_THROWS_AS(ModelConfig::preset("XL"), ConfigError);

  ModelConfig t = ModelConfig::preset("T");
  const int64_t t_dims[4] = {80, 160, 200, 240};
  const int t_depths[4] = {4, 4, 12, 4};
  for (int i = 0; i < 4; ++i) {
    CAPTURE(i);
    CHECK(t.stages[i].dim == t_dims[i]);
    CHECK(t.stages[i].depth == t_depths[i]);
    CHECK(t.stages[i].ratio == doctest::Approx(4.0));
    CHECK(t.stages[i].heads == 8);
  }
  CHECK(t.num_classes == 1000);
  CHECK(t.drop_path_rate == doctest::Approx(0.1));
  CHECK(t.total_depth() == 24);

  ModelConfig b = ModelConfig::preset("B");
  const int64_t b_dims[4] = {200, 240, 320, 480};
  const int b_depths[4] = {8, 8, 12, 8};
  const double b_ratios[4] = {2.0, 2.0, 4.0, 4.0};
  for (int i = 0; i < 4; ++i) {
    CAPTURE(i);
    CHECK(b.stages[i].dim == b_dims[i]);
    CHECK(b.stages[i].depth == b_depths[i]);
    CHECK(b.stages[i].ratio == doctest::Approx(b_ratios[i]));
  }
  CHECK(b.drop_path_rate == doctest::Approx(0.4));

  ModelConfig l = ModelConfig::preset("L");
  CHECK(l.stages[2].depth == 30);
  CHECK(l.stages[3].dim == 480);
  CHECK(l.drop_path_rate == doctest::Approx(0.5));
}

TEST_CASE("drop-path rates ramp linearly from zero to the model rate") {
  ModelConfig cfg = ModelConfig::preset("S");
  const int total = cfg.total_depth();
  CHECK(cfg.drop_path_for(0) == doctest::Approx(0.0));
  CHECK(cfg.drop_path_for(total - 1) == doctest::Approx(cfg.drop_path_rate));
  for (int g = 1; g < total; ++g)
    CHECK(cfg.drop_path_for(g) >= cfg.drop_path_for(g - 1));
}

TEST_CASE("pyramid output sizes follow the stage table") {
  ModelConfig cfg = tiny_config(10, 15, 20, 25);
  Model m = build_model(cfg, 7);
  Tensor img = rand_image(2, 64, 64, 8);
  ModelOutput out = model_forward(nullptr, m, img);
  REQUIRE(out.logits.ndim() == 2);
  CHECK(out.logits.dim(0) == 2);
  CHECK(out.logits.dim(1) == 2);
  const int64_t dims[4] = {10, 15, 20, 25};
  for (int i = 0; i < 4; ++i) {
    CAPTURE(i);
    const Tensor& f = out.features[i];
    REQUIRE(f.ndim() == 4);
    CHECK(f.dim(0) == 2);
    CHECK(f.dim(1) == dims[i]);
    CHECK(f.dim(2) == (64 >> (i + 2)));
    CHECK(f.dim(3) == (64 >> (i + 2)));
  }
}

TEST_CASE("patch embeddings halve and quarter the grid exactly") {
  ModelConfig cfg = tiny_config(10, 20, 10, 10);
  Model m = build_model(cfg, 9);
  Tensor img = rand_image(1, 32, 32, 10);
  Tensor t0 = patch_embed_4x(nullptr, m.stem, img);
  REQUIRE(t0.ndim() == 4);
  CHECK(t0.dim(1) == 10);
  CHECK(t0.dim(2) == 8);
  CHECK(t0.dim(3) == 8);
  REQUIRE(m.stages[1].embed.has_value());
  Tensor t1 = patch_embed_2x(nullptr, *m.stages[1].embed, t0);
  CHECK(t1.dim(1) == 20);
  CHECK(t1.dim(2) == 4);
  CHECK(t1.dim(3) == 4);
}

TEST_CASE("ffn hidden width is the rounded ratio times dim") {
  ModelConfig cfg = tiny_config(40, 10, 10, 10);
  cfg.stages[0].ratio = 4.0;
  cfg.stages[0].heads = 8;
  cfg.stages[1].ratio = 2.5;
  Model m = build_model(cfg, 11);
  const Tensor* w1 = m.store.find("stage0.block0.ffn.w1");
  REQUIRE(w1 != nullptr);
  CHECK(w1->dim(0) == 40);
  CHECK(w1->dim(1) == 160);
  const Tensor* w1b = m.store.find("stage1.block0.ffn.w1");
  REQUIRE(w1b != nullptr);
  CHECK(w1b->dim(1) == 25);
}

TEST_CASE("zero ffn weights map any input to zero") {
  FfnParams p;
  p.w1 = Tensor::zeros({6, 12});
  p.b1 = Tensor::zeros({12});
  p.w2 = Tensor::zeros({12, 6});
  p.b2 = Tensor::zeros({6});
  Rng rng = Rng::from_name(12, "ffn");
  Tensor x = Tensor::rand_uniform({2, 5, 6}, rng, -1.0, 1.0);
  Tensor y = ffn_forward(nullptr, p, x);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("encoder block with zero weights and zero norm affine is a pure shortcut") {
  ModelConfig cfg = tiny_config();
  Model m = build_model(cfg, 13);
  zero_all_params(m.store);
  const GmaConfig gcfg = cfg.gma_for_stage(0);
  Rng rng = Rng::from_name(14, "block");
  Tensor x = Tensor::rand_uniform({2, 16, 10}, rng, -1.0, 1.0);
  Tensor y = encoder_block_forward(nullptr, gcfg, m.stages[0].blocks[0], x, 4,
                                   4, false, nullptr);
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("drop path behaves per contract in both modes") {
  Rng rng = Rng::from_name(15, "drop");
  Tensor x = Tensor::rand_uniform({4, 3}, rng, -1.0, 1.0);
  Tensor r = Tensor::rand_uniform({4, 3}, rng, -1.0, 1.0);
  Tensor plain = op::add(nullptr, x, r);

  SUBCASE("rate zero is exact addition in both modes") {
    CHECK(max_abs_diff(op::drop_path(nullptr, x, r, 0.0, false, nullptr),
                       plain) == 0.0);
    Rng g = Rng::from_name(16, "drop");
    CHECK(max_abs_diff(op::drop_path(nullptr, x, r, 0.0, true, &g), plain) ==
          0.0);
  }

  SUBCASE("eval mode ignores the rate") {
    CHECK(max_abs_diff(op::drop_path(nullptr, x, r, 0.5, false, nullptr),
                       plain) == 0.0);
  }

  SUBCASE("train mode is unbiased over many draws") {
    const int n = 10000;
    Rng g = Rng::from_name(17, "drop.mc");
    Tensor acc = Tensor::zeros({4, 3});
    for (int i = 0; i < n; ++i) {
      Tensor y = op::drop_path(nullptr, x, r, 0.3, true, &g);
      for (int64_t j = 0; j < acc.numel(); ++j) acc.data()[j] += y.data()[j];
    }
    for (int64_t j = 0; j < acc.numel(); ++j) {
      const double mean = acc.data()[j] / n;
      CHECK(mean == doctest::Approx(plain.data()[j]).epsilon(0.05));
    }
  }

  SUBCASE("invalid rate and missing rng are rejected") {
    CHECK_THROWS_AS(op::drop_path(nullptr, x, r, 1.0, false, nullptr),
                    ConfigError);
    CHECK_THROWS_AS(op::drop_path(nullptr, x, r, -0.1, false, nullptr),
                    ConfigError);
    CHECK_THROWS_AS(op::drop_path(nullptr, x, r, 0.5, true, nullptr),
                    ContractError);
  }
}

TEST_CASE("parameter count does not depend on input resolution") {
  ModelConfig cfg = tiny_config(10, 15, 20, 25);
  Model m = build_model(cfg, 19);
  const int64_t direct = count_params(m);
  CostReport a = estimate_cost(cfg, 224, 224);
  CostReport b = estimate_cost(cfg, 384, 384);
  int64_t pa = 0, pb = 0;
  for (const auto& row : a.rows) pa += row.params;
  for (const auto& row : b.rows) pb += row.params;
  CHECK(pa == direct);
  CHECK(pb == direct);
  CHECK(m.store.total_params() == direct);
}

TEST_CASE("forward passes are deterministic") {
  ModelConfig cfg = tiny_config();
  cfg.drop_path_rate = 0.3;
  Model m = build_model(cfg, 21);
  Tensor img = rand_image(2, 32, 32, 22);

  Tensor eval1 = model_forward(nullptr, m, img).logits;
  Tensor eval2 = model_forward(nullptr, m, img).logits;
  CHECK(max_abs_diff(eval1, eval2) == 0.0);

  Rng g1 = Rng::from_name(23, "fwd");
  Rng g2 = Rng::from_name(23, "fwd");
  Tensor tr1 = model_forward(nullptr, m, img, true, &g1).logits;
  Tensor tr2 = model_forward(nullptr, m, img, true, &g2).logits;
  CHECK(max_abs_diff(tr1, tr2) == 0.0);
}

TEST_CASE("rebuilding with the same seed reproduces every parameter") {
  ModelConfig cfg = tiny_config(10, 15, 20, 25);
  Model a = build_model(cfg, 31);
  Model b = build_model(cfg, 31);
  Model c = build_model(cfg, 32);
  REQUIRE(a.store.size() == b.store.size());
  bool any_diff_seed = false;
  for (size_t i = 0; i < a.store.size(); ++i) {
    const auto& ea = a.store.entries()[i];
    const auto& eb = b.store.entries()[i];
    CHECK(ea.name == eb.name);
    CHECK(ea.tensor.data() == eb.tensor.data());
    if (ea.tensor.data() != c.store.entries()[i].tensor.data())
      any_diff_seed = true;
  }
  CHECK(any_diff_seed);
}

TEST_CASE("a four-pixel shift moves the embedding grid by one token") {
  ModelConfig cfg = tiny_config();
  Model m = build_model(cfg, 41);
  const int64_t H = 64, W = 64;
  Tensor img = rand_image(1, H, W, 42);
  Tensor shifted = Tensor::zeros(img.shape());
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 4; x < W; ++x)
        shifted.data()[(c * H + y) * W + x] = img.data()[(c * H + y) * W + x - 4];
  Tensor f0 = patch_embed_4x(nullptr, m.stem, img);
  Tensor f1 = patch_embed_4x(nullptr, m.stem, shifted);
  const int64_t C = f0.dim(1), Ht = f0.dim(2), Wt = f0.dim(3);
  const int64_t margin = 3;
  double worst = 0.0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = margin; i < Ht - margin; ++i)
      for (int64_t j = margin; j < Wt - margin; ++j)
        worst = std::max(worst,
                         std::abs(f1.data()[(c * Ht + i) * Wt + j] -
                                  f0.data()[(c * Ht + i) * Wt + j - 1]));
  CHECK(worst < 1e-12);
}

TEST_CASE("end-to-end gradients match finite differences across all modules") {
  ModelConfig cfg = tiny_config();
  Model m = build_model(cfg, 51);
  Tensor img = rand_image(1, 64, 64, 52);
  std::vector<int> labels = {1};
  std::function<Tensor(Tape&)> f = [&](Tape& tape) {
    ModelOutput out = model_forward(&tape, m, img);
    return op::cross_entropy(&tape, out.logits, labels);
  };
  const std::vector<std::string> names = {
      "stem.conv1.w",          "stem.conv2.w",
      "stem.conv3.b",          "stem.norm4.g",
      "stage0.block0.ln1.g",   "stage0.block0.gma.qkv.w",
      "stage0.block0.gma.branch1.dw.k", "stage0.block0.gma.branch2.pw.w",
      "stage0.block0.gma.branch3.norm.g", "stage0.block0.gma.nonatt.dw.k",
      "stage0.block0.gma.ensemble.lin.w", "stage0.block0.ffn.w1",
      "stage0.block0.ffn.b2",  "stage1.embed.dw.k",
      "stage1.embed.pw.w",     "stage1.block0.gma.qkv.b",
      "stage1.block0.ln2.b",   "stage2.embed.pw.w",
      "stage2.block0.gma.ensemble.norm.g", "stage2.block0.ffn.w2",
      "stage3.embed.dw.k",     "stage3.block0.gma.branch1.pw.b",
      "head.norm.g",           "head.linear.w"};
  std::vector<ParamProbe> probes;
  for (const auto& n : names) {
    const Tensor* t = m.store.find(n);
    REQUIRE_MESSAGE(t != nullptr, n);
    probes.push_back({*t, t->numel() / 2, n});
  }
  CHECK(probes.size() >= 20);
  GradCheckResult r = grad_check_params(f, probes, 1e-5, 1e-3);
  CAPTURE(r.max_rel_err);
  CAPTURE(r.worst_name);
  CAPTURE(r.note);
  CHECK(r.pass);
}

TEST_CASE("invalid configurations and inputs are rejected") {
  {
    ModelConfig cfg = tiny_config();
    cfg.stages[2].dim = 12;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("stage 2"),
                         ConfigError);
  }
  {
    ModelConfig cfg = tiny_config();
    cfg.stages[1].heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  {
    ModelConfig cfg = tiny_config();
    cfg.stages[0].depth = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  {
    ModelConfig cfg = tiny_config();
    cfg.drop_path_rate = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  {
    ModelConfig cfg = tiny_config();
    cfg.num_classes = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  Model m = build_model(tiny_config(), 61);
  Tensor img = rand_image(1, 60, 60, 62);
  CHECK_THROWS_AS(model_forward(nullptr, m, img), ConfigError);
}
