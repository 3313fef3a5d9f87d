#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mp/data.hpp"
#include "mp/optim.hpp"

namespace mp {

struct TrainHyper {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  std::size_t batch_ref = 32;  // linear scaling reference
  double lr = 1e-2;
  double weight_decay = 0.05;
  double warmup_frac = 0.1;
  double lr_min = 1e-6;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch == 0) throw ConfigError("batch size must be at least 1");
    if (batch_ref == 0) throw ConfigError("reference batch size must be at least 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup fraction must lie in [0, 1)");
    if (!(lr_min >= 0.0)) throw ConfigError("minimum learning rate must be non-negative");
  }
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> per_class_count;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over batches
  EvalResult val;
  double wall_ms = 0.0;
};

struct TrainResult {
  double step0_loss = 0.0;
  EvalResult init_eval;
  std::vector<EpochRecord> epochs;
  EvalResult final_eval;
  std::size_t steps = 0;
};

/// Logits [C] for sample i of some indexed set.
using LogitFn = std::function<Value(std::size_t)>;

inline std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

/// Accuracy, mean cross-entropy and per-class accuracy without recording a graph.
inline EvalResult evaluate(const LogitFn& logits_of, std::span<const std::uint32_t> labels, std::size_t classes) {
  if (labels.empty()) throw UsageError("cannot evaluate on an empty dataset");
  NoGradGuard no_grad;
  EvalResult r;
  r.samples = labels.size();
  r.per_class_accuracy.assign(classes, 0.0);
  r.per_class_count.assign(classes, 0);
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Value logits = logits_of(i);
    const std::uint32_t y = labels[i];
    loss += softmax_cross_entropy(stack({logits}), std::span<const std::uint32_t>(&labels[i], 1)).item();
    const bool hit = argmax(logits.data()) == y;
    correct += hit;
    r.per_class_count.at(y) += 1;
    r.per_class_accuracy[y] += hit;
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.per_class_count[c]) r.per_class_accuracy[c] /= static_cast<double>(r.per_class_count[c]);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  r.loss = loss / static_cast<double>(labels.size());
  return r;
}

inline Schedule make_schedule(const TrainHyper& h, std::size_t train_size) {
  const std::size_t per_epoch = (train_size + h.batch - 1) / h.batch;
  Schedule s;
  s.total_steps = h.epochs * per_epoch;
  s.warmup_steps = static_cast<std::size_t>(std::floor(h.warmup_frac * static_cast<double>(s.total_steps)));
  s.lr_base = linear_scale_lr(h.lr, h.batch, h.batch_ref);
  s.lr_min = std::min(h.lr_min, s.lr_base);
  s.validate();
  return s;
}

/// Mini-batch AdamW over `params`. Update k (0-based) uses lr_at(k + 1), so
/// the first update already has a nonzero rate and the last lands on lr_min.
/// Sample order is fixed by (seed, epoch).
inline TrainResult train(const LogitFn& train_logits, std::span<const std::uint32_t> train_labels,
                         const LogitFn& val_logits, std::span<const std::uint32_t> val_labels, std::size_t classes,
                         std::vector<Value> params, const TrainHyper& h) {
  h.validate();
  if (train_labels.empty()) throw UsageError("training set is empty");
  const Schedule sched = make_schedule(h, train_labels.size());
  AdamW opt(std::move(params), {0.9, 0.999, 1e-8, h.weight_decay});
  TrainResult result;
  result.init_eval = evaluate(val_logits, val_labels, classes);
  bool first = true;
  for (std::size_t epoch = 0; epoch < h.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    const auto batches = batch_iter(train_labels.size(), h.batch, h.seed, epoch);
    for (const auto& batch : batches) {
      std::vector<Value> rows;
      std::vector<std::uint32_t> ys;
      rows.reserve(batch.size());
      ys.reserve(batch.size());
      for (std::size_t i : batch) {
        rows.push_back(train_logits(i));
        ys.push_back(train_labels[i]);
      }
      const Value loss = softmax_cross_entropy(stack(rows), ys);
      if (first) {
        result.step0_loss = loss.item();
        first = false;
      }
      opt.zero_grad();
      backward(loss);
      opt.step(lr_at(opt.steps() + 1, sched));
      loss_sum += loss.item();
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(batches.size());
    rec.val = evaluate(val_logits, val_labels, classes);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(std::move(rec));
  }
  result.steps = opt.steps();
  result.final_eval = result.epochs.back().val;
  return result;
}

}  // namespace mp
