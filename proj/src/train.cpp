#include "gmx/train.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>

#include "gmx/error.hpp"
#include "gmx/ops.hpp"

namespace gmx {

namespace op = gmx::ops;

void SyntheticSpec::validate() const {
  if (image_size < 8 || image_size % 4 != 0)
    throw ConfigError("synthetic task: image_size must be >= 8 and divisible "
                      "by 4, got " +
                      std::to_string(image_size));
  if (patch_size < 1)
    throw ConfigError("synthetic task: patch_size must be >= 1");
  if (image_size < 2 * patch_size)
    throw ConfigError(
        "synthetic task: grid too small for two non-overlapping patches (need "
        "image_size >= 2*patch_size, got " +
        std::to_string(image_size) + " < " + std::to_string(2 * patch_size) +
        ")");
  if (intensity_lo < 0.0 || intensity_hi > 1.0 || intensity_lo >= intensity_hi)
    throw ConfigError(
        "synthetic task: need 0 <= intensity_lo < intensity_hi <= 1");
  if (match_margin <= 0.0 || mismatch_gap <= match_margin)
    throw ConfigError(
        "synthetic task: need 0 < match_margin < mismatch_gap");
  // a mismatching pair must fit inside the intensity range
  if (mismatch_gap >= intensity_hi - intensity_lo)
    throw ConfigError(
        "synthetic task: mismatch_gap must be < intensity_hi - intensity_lo");
  if (noise_sigma < 0.0)
    throw ConfigError("synthetic task: noise_sigma must be >= 0");
}

namespace {

struct PatchDraw {
  int64_t y0, x0, y1, x1;  // top-left corners
  double a, b;
  int label;
};

PatchDraw draw_sample(const SyntheticSpec& spec, Rng& rng) {
  PatchDraw d;
  const int64_t span = spec.image_size - spec.patch_size + 1;
  d.y0 = static_cast<int64_t>(rng.uniform_int(span));
  d.x0 = static_cast<int64_t>(rng.uniform_int(span));
  do {
    d.y1 = static_cast<int64_t>(rng.uniform_int(span));
    d.x1 = static_cast<int64_t>(rng.uniform_int(span));
  } while (std::abs(d.y1 - d.y0) < spec.patch_size &&
           std::abs(d.x1 - d.x0) < spec.patch_size);
  d.label = rng.bernoulli(0.5) ? 1 : 0;
  // Rejection sampling keeps both intensities in range by construction and
  // makes the label exactly the |a-b| predicate.
  do {
    d.a = rng.uniform(spec.intensity_lo, spec.intensity_hi);
    d.b = rng.uniform(spec.intensity_lo, spec.intensity_hi);
  } while (d.label == 1 ? std::abs(d.a - d.b) > spec.match_margin
                        : std::abs(d.a - d.b) < spec.mismatch_gap);
  return d;
}

void paint(double* img, int64_t s, int64_t y0, int64_t x0, int64_t k,
           double value) {
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = y0; y < y0 + k; ++y)
      for (int64_t x = x0; x < x0 + k; ++x)
        img[(c * s + y) * s + x] = value;
}

}  // namespace

Batch gen_synthetic(const SyntheticSpec& spec, uint64_t seed,
                    int64_t start_index, int64_t count) {
  spec.validate();
  if (count < 1) throw ConfigError("gen_synthetic: count must be >= 1");
  const int64_t s = spec.image_size;
  Batch batch;
  batch.images = Tensor::zeros({count, 3, s, s});
  batch.labels.resize(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    Rng rng =
        Rng::from_name(seed, "synthetic." + std::to_string(start_index + i));
    double* img = batch.images.data().data() + i * 3 * s * s;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < s * s; ++p) {
        double v = spec.noise_mean + spec.noise_sigma * rng.normal();
        img[c * s * s + p] = std::clamp(v, 0.0, 1.0);
      }
    const PatchDraw d = draw_sample(spec, rng);
    paint(img, s, d.y0, d.x0, spec.patch_size, d.a);
    paint(img, s, d.y1, d.x1, spec.patch_size, d.b);
    batch.labels[static_cast<size_t>(i)] = d.label;
  }
  return batch;
}

AdamW::AdamW(const ParamStore& store, AdamWConfig cfg)
    : cfg_(cfg), n_tensors_(store.size()) {
  m_.reserve(n_tensors_);
  v_.reserve(n_tensors_);
  for (const auto& e : store.entries()) {
    m_.emplace_back(static_cast<size_t>(e.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(e.tensor.numel()), 0.0);
  }
}

void AdamW::step(const ParamStore& store, double lr) {
  if (store.size() != n_tensors_)
    throw ContractError("adamw: parameter store changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t ti = 0; ti < n_tensors_; ++ti) {
    const auto& entry = store.entries()[ti];
    Tensor p = entry.tensor;
    const std::vector<double>& g = p.grad();
    std::vector<double>& x = p.data();
    std::vector<double>& m = m_[ti];
    std::vector<double>& v = v_[ti];
    // biases and norm affines (1-D) are exempt from decay
    const double wd = p.ndim() > 1 ? cfg_.weight_decay : 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i];
      if (!std::isfinite(gi))
        throw NumericError("adamw: non-finite gradient in '" + entry.name +
                           "' at element " + std::to_string(i));
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      x[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + wd * x[i]);
    }
  }
}

double cosine_lr(int64_t step, int64_t total, int64_t warmup, double base_lr,
                 double floor_lr) {
  if (total <= 0 || warmup < 0 || warmup >= total)
    throw ConfigError("cosine_lr: need 0 <= warmup < total");
  if (step < 0) throw ConfigError("cosine_lr: negative step");
  if (step > total) step = total;
  if (step < warmup)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup) /
                   static_cast<double>(total - warmup);
  return floor_lr + (base_lr - floor_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

double clip_global_norm(const ParamStore& store, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_global_norm: max_norm <= 0");
  double sq = 0.0;
  for (const auto& e : store.entries())
    for (double g : e.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& e : store.entries()) {
      Tensor t = e.tensor;
      for (double& g : t.grad()) g *= f;
    }
  }
  return norm;
}

ModelConfig toy_model_config(bool aggregators_on) {
  ModelConfig cfg;
  for (int i = 0; i < 4; ++i) cfg.stages[static_cast<size_t>(i)] = {20, 4.0, 1, 2};
  cfg.num_classes = 2;
  cfg.drop_path_rate = 0.0;
  if (!aggregators_on) cfg.branches.enabled = {false, false, false, false};
  return cfg;
}

// Batch for global step s: sample indices s*B+k, wrapped onto the fixed
// train set when dataset_size > 0. Indexing by global step keeps resumed
// runs on the exact same data sequence.
Batch fetch_batch(const TrainConfig& tc, int64_t step) {
  const int64_t B = tc.batch_size;
  if (tc.dataset_size <= 0)
    return gen_synthetic(tc.task, tc.seed, step * B, B);
  const int64_t n = tc.dataset_size;
  const int64_t s_img = 3 * tc.task.image_size * tc.task.image_size;
  Batch out;
  out.images = Tensor::zeros({B, 3, tc.task.image_size, tc.task.image_size});
  out.labels.resize(static_cast<size_t>(B));
  for (int64_t k = 0; k < B; ++k) {
    const int64_t idx = (step * B + k) % n;
    Batch one = gen_synthetic(tc.task, tc.seed, idx, 1);
    std::copy(one.images.data().begin(), one.images.data().end(),
              out.images.data().begin() + k * s_img);
    out.labels[static_cast<size_t>(k)] = one.labels[0];
  }
  return out;
}

TrainResult train_model(Model& m, const TrainConfig& tc,
                        std::ostream* metrics) {
  tc.task.validate();
  if (tc.steps < 1 || tc.batch_size < 1)
    throw ConfigError("train: steps and batch_size must be >= 1");
  if (tc.start_step < 0 || tc.start_step >= tc.steps)
    throw ConfigError("train: start_step must be in [0, steps)");
  if (tc.warmup >= tc.steps)
    throw ConfigError("train: warmup must be < steps");

  AdamWConfig ocfg;
  ocfg.weight_decay = tc.weight_decay;
  AdamW opt(m.store, ocfg);

  TrainResult result;
  std::deque<double> acc_window;
  double acc_sum = 0.0;

  if (metrics) {
    *metrics << "step,lr,loss,accuracy\n";
    metrics->setf(std::ios::fixed);
  }

  const uint64_t drop_stream = Rng::hash_name("drop_path");
  for (int64_t s = tc.start_step; s < tc.steps; ++s) {
    Batch batch = fetch_batch(tc, s);
    Tape tape;
    Rng drop_rng(tc.seed, drop_stream + static_cast<uint64_t>(s));
    ModelOutput out = model_forward(&tape, m, batch.images, true, &drop_rng);
    Tensor loss = op::cross_entropy(&tape, out.logits, batch.labels);
    const double loss_v = loss.item();
    if (!std::isfinite(loss_v)) {
      result.diverged = true;
      result.diverged_step = s;
      result.steps_run = s - tc.start_step;
      return result;
    }

    int correct = 0;
    const int64_t C = out.logits.dim(1);
    for (int64_t i = 0; i < tc.batch_size; ++i) {
      const double* row = out.logits.data().data() + i * C;
      int64_t arg = 0;
      for (int64_t c = 1; c < C; ++c)
        if (row[c] > row[arg]) arg = c;
      correct += arg == batch.labels[static_cast<size_t>(i)] ? 1 : 0;
    }
    const double acc = static_cast<double>(correct) /
                       static_cast<double>(tc.batch_size);
    acc_window.push_back(acc);
    acc_sum += acc;
    if (static_cast<int64_t>(acc_window.size()) > tc.acc_window) {
      acc_sum -= acc_window.front();
      acc_window.pop_front();
    }
    const double rolling = acc_sum / static_cast<double>(acc_window.size());

    m.store.zero_grad();
    tape.backward(loss);
    clip_global_norm(m.store, tc.clip_norm);
    const double lr = cosine_lr(s + 1, tc.steps, tc.warmup, tc.base_lr,
                                tc.floor_lr);
    opt.step(m.store, lr);

    result.steps_run = s - tc.start_step + 1;
    result.final_loss = loss_v;
    result.final_accuracy = rolling;
    const bool last = s + 1 == tc.steps;
    if (metrics && (s % tc.log_every == 0 || last))
      *metrics << s << ',' << std::setprecision(8) << lr << ','
               << std::setprecision(6) << loss_v << ','
               << std::setprecision(6) << rolling << '\n';

    if (tc.stop_at_accuracy > 0.0 &&
        static_cast<int64_t>(acc_window.size()) >= tc.acc_window &&
        rolling >= tc.stop_at_accuracy) {
      result.first_step_at_target = s;
      if (metrics && !(s % tc.log_every == 0 || last))
        *metrics << s << ',' << std::setprecision(8) << lr << ','
                 << std::setprecision(6) << loss_v << ','
                 << std::setprecision(6) << rolling << '\n';
      break;
    }
  }
  return result;
}

}  // namespace gmx
