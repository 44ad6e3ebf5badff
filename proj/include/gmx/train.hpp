#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "gmx/backbone.hpp"
#include "gmx/param_store.hpp"

namespace gmx {

// Two constant-intensity k x k patches on a noisy background; label 1 iff
// the patch intensities match within the margin. Solving it requires
// comparing group aggregates across locations, not single pixels. Patches
// are drawn from [intensity_lo, intensity_hi], well above the background
// mean, so both patches are always visible; pairs are rejection-sampled so
// |a-b| <= margin (match) or >= gap (mismatch) with a dead zone between.
struct SyntheticSpec {
  int64_t image_size = 32;
  int64_t patch_size = 7;
  double noise_mean = 0.15;
  double noise_sigma = 0.08;
  double intensity_lo = 0.50;
  double intensity_hi = 0.95;
  double match_margin = 0.05;   // |a-b| <= margin for label 1
  double mismatch_gap = 0.25;   // |a-b| >= gap for label 0
  void validate() const;
};

struct Batch {
  Tensor images;            // [n,3,S,S]
  std::vector<int> labels;  // n entries in {0,1}
};

// Deterministic in (spec, seed, sample index); batches drawn from a single
// global sample sequence so resumed runs see identical data.
Batch gen_synthetic(const SyntheticSpec& spec, uint64_t seed,
                    int64_t start_index, int64_t count);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWConfig cfg = {});
  // reads accumulated grads; decoupled decay on the parameter values,
  // skipped for 1-D tensors (biases, norm affines)
  void step(const ParamStore& store, double lr);
  int64_t steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  size_t n_tensors_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Linear warmup 0 -> base over `warmup` steps, then cosine from base to
// floor at `total`. Evaluated 1-based: the first update uses step=1.
double cosine_lr(int64_t step, int64_t total, int64_t warmup, double base_lr,
                 double floor_lr);

// Returns the pre-clip global norm; rescales grads in place when above max.
double clip_global_norm(const ParamStore& store, double max_norm);

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch_size = 32;
  int64_t warmup = 100;
  double base_lr = 3e-3;
  double floor_lr = 1e-5;
  double weight_decay = 0.05;
  double clip_norm = 5.0;
  uint64_t seed = 42;
  int64_t log_every = 10;
  int64_t start_step = 0;
  int64_t dataset_size = 512;      // fixed train set, cycled; 0 = streaming
  double stop_at_accuracy = -1.0;  // early stop on rolling accuracy, <=0 off
  int64_t acc_window = 25;         // batches in the rolling window
  SyntheticSpec task;
};

struct TrainResult {
  int64_t steps_run = 0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;  // rolling window mean
  bool diverged = false;
  int64_t diverged_step = -1;
  int64_t first_step_at_target = -1;
};

// metrics (optional): CSV `step,lr,loss,accuracy`, one row per log interval.
TrainResult train_model(Model& m, const TrainConfig& tc, std::ostream* metrics);

// The batch the training loop sees at a given global step.
Batch fetch_batch(const TrainConfig& tc, int64_t step);

// The desk-scale model used by the mechanism experiments:
// D=[20,20,20,20], L=[1,1,1,1], heads=2, 2 classes.
ModelConfig toy_model_config(bool aggregators_on = true);

}  // namespace gmx
