#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "fps/core/ops.hpp"
#include "fps/core/rng.hpp"
#include "fps/metrics.hpp"
#include "fps/model.hpp"
#include "fps/mrisim.hpp"

namespace fps {

/// Mean absolute difference over every component; subgradient 0 at ties.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& out, const Tensor<T>& gt) {
  if (out.shape() != gt.shape())
    throw ShapeError("l1_loss: " + shape_str(out.shape()) + " vs " + shape_str(gt.shape()));
  const std::size_t n = out.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(out.values()[i]) - gt.values()[i]);
  return detail::make_result<T>({1}, {static_cast<T>(s / n)}, {out, gt}, [n](Node<T>& self) {
    const auto& a = self.parents[0]->data;
    const auto& b = self.parents[1]->data;
    const T g = self.grad[0] / static_cast<T>(n);
    T* ga = detail::grad_sink(self, 0);
    T* gb = detail::grad_sink(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T sign = a[i] > b[i] ? T(1) : a[i] < b[i] ? T(-1) : T(0);
      if (ga) ga[i] += sign * g;
      if (gb) gb[i] -= sign * g;
    }
  });
}

struct TrainConfig {
  int iterations = 2000;
  int batch = 4;
  double lr_init = 1e-4;
  double lr_final = 1e-6;
  double warm_fraction = 92.0 / 300.0;  // share of steps held at lr_init
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 1;
  int eval_every = 250;
  int log_every = 100;
  ModelConfig model;

  [[nodiscard]] int warm_steps() const { return static_cast<int>(std::lround(warm_fraction * iterations)); }

  void validate() const {
    model.validate();
    if (iterations < 1 || batch < 1) throw ConfigError("iterations and batch must be positive");
    if (!(lr_init > 0.0) || !(lr_final > 0.0) || lr_final > lr_init)
      throw ConfigError("learning rates must satisfy 0 < lr_final <= lr_init");
    if (!(warm_fraction > 0.0 && warm_fraction < 1.0)) throw ConfigError("warm_fraction must lie in (0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (eval_every < 1 || log_every < 1) throw ConfigError("eval_every and log_every must be positive");
  }
};

inline std::string train_config_text(const TrainConfig& c) {
  std::ostringstream o;
  o << "iterations = " << c.iterations << "\nbatch = " << c.batch << "\nlr_init = " << format_double(c.lr_init)
    << "\nlr_final = " << format_double(c.lr_final) << "\nwarm_fraction = " << format_double(c.warm_fraction)
    << "\nweight_decay = " << format_double(c.weight_decay) << "\nclip_norm = " << format_double(c.clip_norm)
    << "\nseed = " << c.seed << "\neval_every = " << c.eval_every << "\nlog_every = " << c.log_every << "\n"
    << model_config_text(c.model);
  return o.str();
}

/// Parses `key = value` lines; model keys and trainer keys share one file.
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  for (const auto& e : parse_key_values(text)) {
    if (apply_model_key(c.model, e)) continue;
    const std::string& k = e.key;
    if (k == "iterations") c.iterations = parse_number<int>(e);
    else if (k == "batch") c.batch = parse_number<int>(e);
    else if (k == "lr_init") c.lr_init = parse_number<double>(e);
    else if (k == "lr_final") c.lr_final = parse_number<double>(e);
    else if (k == "warm_fraction") c.warm_fraction = parse_number<double>(e);
    else if (k == "weight_decay") c.weight_decay = parse_number<double>(e);
    else if (k == "clip_norm") c.clip_norm = parse_number<double>(e);
    else if (k == "seed") c.seed = parse_number<std::uint64_t>(e);
    else if (k == "eval_every") c.eval_every = parse_number<int>(e);
    else if (k == "log_every") c.log_every = parse_number<int>(e);
    else throw ConfigError("line " + std::to_string(e.line) + ": unknown config key '" + k + "'");
  }
  c.validate();
  return c;
}

/// Constant lr_init for the warm steps, then cosine down to lr_final at the
/// last step.
inline double cosine_schedule(int step, const TrainConfig& c) {
  const int warm = c.warm_steps();
  if (step < warm) return c.lr_init;
  const int span = c.iterations - 1 - warm;
  const double progress = span <= 0 ? 1.0 : std::min(1.0, static_cast<double>(step - warm) / span);
  return c.lr_final + 0.5 * (c.lr_init - c.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
struct AdamState {
  long step = 0;
  std::map<std::string, std::vector<T>> m, v;
};

/// Global L2 norm of all gradients; scales them down to `max_norm` if above.
template <class T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (auto& [_, t] : store.params())
    for (T g : t.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [_, t] : store.params())
      for (T& g : t.mutable_grad()) g *= s;
  }
  return norm;
}

/// AdamW: decay applied to the weights directly, then the bias-corrected
/// adaptive step.
template <class T>
void optimizer_step(ParamStore<T>& store, AdamState<T>& st, double lr, const TrainConfig& c) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (auto& [name, t] : store.params()) {
    auto w = t.mutable_data();
    auto g = t.grad();
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) {
      m.assign(w.size(), T(0));
      v.assign(w.size(), T(0));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      m[i] = static_cast<T>(c.beta1 * m[i] + (1.0 - c.beta1) * gi);
      v[i] = static_cast<T>(c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi);
      double wi = static_cast<double>(w[i]) * (1.0 - lr * c.weight_decay);
      wi -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

/// Stacks items [idx...] of a split into one batch.
template <class T>
LoadedRecord<T> make_batch(const std::vector<LoadedRecord<T>>& recs, std::span<const int> idx) {
  auto stack = [&](auto member) {
    std::vector<Tensor<T>> parts;
    for (int i : idx) parts.push_back(recs[i].*member);
    Shape s = parts.front().shape();
    s[0] = static_cast<int>(parts.size());
    std::vector<T> v;
    v.reserve(shape_numel(s));
    for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
    return Tensor<T>::from(s, std::move(v));
  };
  return {stack(&LoadedRecord<T>::gt), stack(&LoadedRecord<T>::zero_filled), stack(&LoadedRecord<T>::y),
          stack(&LoadedRecord<T>::mask)};
}

struct EvalResult {
  MetricsReport recon, zero_filled;
};

/// Runs the model over every record; metrics on magnitudes.
template <class T>
EvalResult evaluate(const Model<T>& m, const LoadedSplit<T>& split, int batch = 4) {
  NoGradGuard guard;
  EvalResult res;
  const auto& recs = split.records;
  const int size = split.info.size;
  std::vector<int> idx;
  for (int start = 0; start < static_cast<int>(recs.size()); start += batch) {
    idx.clear();
    for (int i = start; i < std::min<int>(start + batch, recs.size()); ++i) idx.push_back(i);
    const auto b = make_batch(recs, idx);
    const Tensor<T> out = forward(m, b.zero_filled, b.y, b.mask);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto gt = magnitude(b.gt, static_cast<int>(j));
      const std::string id = std::to_string(idx[j]);
      res.recon.add(image_metrics(id, magnitude(out, static_cast<int>(j)), gt, size, size));
      res.zero_filled.add(image_metrics(id, magnitude(b.zero_filled, static_cast<int>(j)), gt, size, size));
    }
  }
  res.recon.finalize();
  res.zero_filled.finalize();
  return res;
}

struct StepRecord {
  int step;
  double loss, lr;
};

struct ValRecord {
  int step;
  double nmse, psnr_db, ssim;
};

struct TrainLog {
  std::string variant;
  std::vector<StepRecord> steps;
  std::vector<ValRecord> val;
  int best_step = -1;
  double best_psnr = -INFINITY;

  /// Mean loss over `window` steps starting at `from` (clamped).
  [[nodiscard]] double mean_loss(std::size_t from, std::size_t window) const {
    from = std::min(from, steps.size());
    const std::size_t to = std::min(steps.size(), from + window);
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += steps[i].loss;
    return to > from ? s / static_cast<double>(to - from) : NAN;
  }

  [[nodiscard]] std::string steps_csv() const {
    std::string out = "step,loss,lr\n";
    char buf[96];
    for (const auto& r : steps) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.step, r.loss, r.lr);
      out += buf;
    }
    return out;
  }

  [[nodiscard]] std::string val_csv() const {
    std::string out = "step,nmse,psnr_db,ssim\n";
    char buf[128];
    for (const auto& r : val) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.6f,%.9f\n", r.step, r.nmse, r.psnr_db, r.ssim);
      out += buf;
    }
    return out;
  }
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: keep everything in memory
  std::function<void(const std::string&)> progress;
};

template <class T>
struct TrainResult {
  Model<T> best;
  TrainLog log;
};

/// Trains from `cfg.seed`; validates every eval_every steps and at the end,
/// keeping the best-by-PSNR weights (written as model.ckpt when a directory
/// is given). A non-finite loss stops training with the best checkpoint
/// left in place.
template <class T>
TrainResult<T> train(const TrainConfig& cfg, const LoadedSplit<T>& train_set, const LoadedSplit<T>& val_set,
                     const TrainOutputs& io = {}) {
  cfg.validate();
  if (train_set.records.empty()) throw ConfigError("training split is empty");
  if (val_set.records.empty()) throw ConfigError("validation split is empty");
  const int size = train_set.info.size;
  cfg.model.check_resolution(size, size);

  Model<T> m = init_weights<T>(cfg.model, cfg.seed);
  TrainLog log;
  log.variant = cfg.model.variant();
  std::string best_bytes = encode_checkpoint(m);
  AdamState<T> opt;
  Rng order_rng(cfg.seed, "batches");
  std::vector<int> order(train_set.records.size());
  std::size_t cursor = order.size();
  auto say = [&](const std::string& s) {
    if (io.progress) io.progress(s);
  };
  auto save_best = [&]() {
    if (!io.dir.empty()) write_file(io.dir / "model.ckpt", best_bytes);
  };

  auto validate_now = [&](int step) {
    const EvalResult r = evaluate(m, val_set, cfg.batch);
    log.val.push_back({step, r.recon.mean.nmse, r.recon.mean.psnr_db, r.recon.mean.ssim});
    char buf[160];
    std::snprintf(buf, sizeof buf, "step %d val psnr %.3f ssim %.4f (zero-filled %.3f)", step, r.recon.mean.psnr_db,
                  r.recon.mean.ssim, r.zero_filled.mean.psnr_db);
    say(buf);
    if (r.recon.mean.psnr_db > log.best_psnr) {
      log.best_psnr = r.recon.mean.psnr_db;
      log.best_step = step;
      best_bytes = encode_checkpoint(m);
      save_best();
    }
  };

  std::vector<int> idx(cfg.batch);
  for (int step = 0; step < cfg.iterations; ++step) {
    for (int& i : idx) {
      if (cursor == order.size()) {  // reshuffle per epoch (Fisher-Yates)
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
        for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[order_rng.below(k)]);
        cursor = 0;
      }
      i = order[cursor++];
    }
    const auto b = make_batch(train_set.records, idx);
    m.store.zero_grad();
    Tensor<T> loss = l1_loss(forward(m, b.zero_filled, b.y, b.mask), b.gt);
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) {
      save_best();
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; best checkpoint kept");
    }
    loss.backward();
    clip_grad_norm(m.store, cfg.clip_norm);
    const double lr = cosine_schedule(step, cfg);
    optimizer_step(m.store, opt, lr, cfg);
    log.steps.push_back({step, lv, lr});
    if ((step + 1) % cfg.log_every == 0) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "step %d loss %.5f lr %.3g", step + 1, log.mean_loss(step + 1 - cfg.log_every, cfg.log_every), lr);
      say(buf);
    }
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.iterations) validate_now(step + 1);
  }
  if (!io.dir.empty()) {
    write_file(io.dir / "train_log.csv", log.steps_csv());
    write_file(io.dir / "val_log.csv", log.val_csv());
  }
  return {decode_checkpoint<T>(best_bytes), std::move(log)};
}

}  // namespace fps
