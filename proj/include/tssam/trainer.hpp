#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tssam/data.hpp"
#include "tssam/losses.hpp"
#include "tssam/metrics.hpp"
#include "tssam/model.hpp"

namespace tssam::trainer {

/// lr0 * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be >= 1");
  if (step > total_steps)
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  if (step == total_steps) return 0.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay. Moment buffers exist only for trainable parameters.
template <class T>
class Adam {
 public:
  explicit Adam(const ParamStore<T>& store, AdamOptions opt = {}) : opt_(opt) {
    for (const auto& e : store.entries())
      if (e.trainable()) state_.emplace(e.name, Slot{Tensor<T>(e.value.shape()), Tensor<T>(e.value.shape())});
    if (state_.empty()) throw ConfigError("optimizer: the model has no trainable parameters");
  }

  void step(ParamStore<T>& store, const std::vector<std::pair<std::string, Tensor<T>>>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (const auto& [name, g] : grads) {
      auto it = state_.find(name);
      if (it == state_.end()) throw ConfigError("optimizer: gradient for non-trainable '" + name + "'");
      auto& p = store.value(name);
      auto& [m, v] = it->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = T(opt_.beta1) * m[i] + T(1 - opt_.beta1) * g[i];
        v[i] = T(opt_.beta2) * v[i] + T(1 - opt_.beta2) * g[i] * g[i];
        const double mhat = double(m[i]) / c1, vhat = double(v[i]) / c2;
        p[i] = T(double(p[i]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  std::vector<std::string> state_keys() const {
    std::vector<std::string> k;
    for (const auto& [name, s] : state_) k.push_back(name);
    return k;
  }
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  struct Slot {
    Tensor<T> m, v;
  };
  AdamOptions opt_;
  std::map<std::string, Slot> state_;
  std::size_t t_ = 0;
};

// ------------------------------------------------------------------ log

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::map<std::string, double> components;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0;
  std::optional<metrics::MetricReport> eval;
};

/// Step records t = 0..T-1 carry the lr used for update t and the loss
/// before it; the closing record at t = T carries lr 0 and the eval-mode
/// training loss of the final parameters.
struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0;  // kept out of the NDJSON stream
};

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json c = nlohmann::json::object();
  for (const auto& [k, v] : r.components) c[k] = v;
  return {{"type", "step"}, {"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"components", c}};
}

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"type", "epoch"}, {"epoch", r.epoch}, {"mean_loss", r.mean_loss}};
  if (r.eval) j["eval"] = metrics::to_json(*r.eval);
  return j;
}

inline void write_ndjson(std::ostream& os, const TrainLog& log) {
  for (const auto& s : log.steps) os << to_json(s).dump() << '\n';
  for (const auto& e : log.epochs) os << to_json(e).dump() << '\n';
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  /// Overrides epochs * batches-per-epoch when set; epochs repeat until reached.
  std::optional<std::size_t> max_steps;
  /// Every batch is the whole dataset.
  bool full_batch = false;
  const std::vector<data::SegSample>* eval_set = nullptr;
  std::function<void(std::size_t step, const ParamStore<float>&)> on_checkpoint;
  std::function<void(const StepRecord&)> on_step;
};

template <class T>
using LossFn = std::function<losses::LossTerms<T>(Var<T>, const Tensor<T>&)>;

template <class T>
LossFn<T> loss_for(Task task) {
  return [task](Var<T> z, const Tensor<T>& y) { return losses::for_task(task, z, y); };
}

/// Shadow detection replaces the RGB input by its high-frequency component.
inline std::vector<data::SegSample> task_inputs(const std::vector<data::SegSample>& samples, Task task) {
  if (task != Task::shadow) return samples;
  auto out = samples;
  parallel_for(out.size(), [&](std::size_t i) { out[i].image = data::high_freq_component(out[i].image); });
  return out;
}

template <class T>
T mean_loss(Model<T>& model, const std::vector<data::SegSample>& samples, Task task) {
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto [img, msk] = data::make_batch<T>(samples, all);
  Tape<T> tape(false);
  Context<T> ctx(tape, model.params(), Mode::eval);
  return losses::for_task(task, model.forward(ctx, tape.constant(img)), msk).value().total;
}

struct TrainResult {
  TrainLog log;
  std::vector<std::string> optimizer_keys;
};

/// Trains `model` in place. On a non-finite loss or gradient the store is
/// rolled back to the state before the failing step and NumericError is thrown.
inline TrainResult train(Model<float>& model, const std::vector<data::SegSample>& dataset, const TrainConfig& cfg,
                         const TrainOptions& opt = {});

template <class T>
metrics::MetricReport evaluate(Model<T>& model, const std::vector<data::SegSample>& samples, Task task = Task::cod);

inline TrainResult train(Model<float>& model, const std::vector<data::SegSample>& dataset, const TrainConfig& cfg,
                         const TrainOptions& opt) {
  validate(cfg);
  if (dataset.size() < 2) throw ConfigError("train: need at least 2 samples for batch-norm statistics");
  for (const auto& s : dataset) data::validate(s);
  const auto inputs = task_inputs(dataset, cfg.task);
  const auto loss_fn = loss_for<float>(cfg.task);

  const std::size_t bs = opt.full_batch ? dataset.size() : std::min(cfg.batch_size, dataset.size());
  std::size_t per_epoch = dataset.size() / bs;
  if (dataset.size() % bs >= 2) ++per_epoch;  // a trailing batch of one is dropped
  const std::size_t total = opt.max_steps ? *opt.max_steps : cfg.epochs * per_epoch;

  Adam<float> adam(model.params());
  TrainResult result;
  result.optimizer_keys = adam.state_keys();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());

  std::size_t t = 0;
  for (std::size_t epoch = 0; t < total; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (!opt.full_batch) std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && t < total; start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      if (end - start < 2) break;
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(start), order.begin() + std::ptrdiff_t(end));
      auto [img, msk] = data::make_batch<float>(inputs, idx);

      const auto backup = model.params();
      Tape<float> tape(true);
      Context<float> ctx(tape, model.params(), Mode::train);
      losses::LossValue<float> value;
      std::vector<std::pair<std::string, Tensor<float>>> grads;
      try {
        auto terms = loss_fn(model.forward(ctx, tape.constant(img)), msk);
        value = terms.value();
        if (!std::isfinite(value.total)) throw NumericError("train: non-finite loss at step " + std::to_string(t));
        tape.backward(terms.total);
        grads = ctx.gradients();
        for (const auto& [name, g] : grads)
          if (!g.all_finite())
            throw NumericError("train: non-finite gradient for '" + name + "' at step " + std::to_string(t));
      } catch (const NumericError& e) {
        model.params() = backup;  // running statistics may already have moved
        throw NumericError(std::string(e.what()).rfind("train:", 0) == 0 ? e.what()
                                                                          : "train: step " + std::to_string(t) + ": " + e.what());
      }
      StepRecord rec{t, cosine_lr(t, total, cfg.lr0), double(value.total), {}};
      for (const auto& [k, v] : value.components) rec.components[k] = double(v);
      adam.step(model.params(), grads, rec.lr);
      if (opt.on_step) opt.on_step(rec);
      result.log.steps.push_back(std::move(rec));
      epoch_loss += double(value.total);
      ++epoch_steps;
      ++t;
      if (cfg.checkpoint_every && t % cfg.checkpoint_every == 0 && opt.on_checkpoint) opt.on_checkpoint(t, model.params());
    }
    if (epoch_steps == 0) break;
    EpochRecord er{epoch, epoch_loss / double(epoch_steps), std::nullopt};
    if (opt.eval_set) er.eval = evaluate(model, *opt.eval_set, cfg.task);
    result.log.epochs.push_back(std::move(er));
  }
  if (total > 0) {
    StepRecord closing{total, cosine_lr(total, total, cfg.lr0), double(mean_loss(model, inputs, cfg.task)), {}};
    if (opt.on_step) opt.on_step(closing);
    result.log.steps.push_back(std::move(closing));
  }
  return result;
}

// ------------------------------------------------------------------ evaluate

/// Eval-mode probabilities (sigmoid of logits), one (H,W) map per sample id.
/// Samples whose size differs from the model's are resized in, and the
/// probability map is resized back to the sample's own resolution.
template <class T>
std::map<std::string, metrics::Map> predict_maps(Model<T>& model, const std::vector<data::SegSample>& samples,
                                                 Task task = Task::cod) {
  const auto inputs = task_inputs(samples, task);
  const std::size_t mh = model.config().image_height, mw = model.config().image_width;
  std::vector<metrics::Map> maps(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    const auto& s = inputs[i];
    const auto sized = data::resize_sample(s, mh, mw);
    auto [img, msk] = data::make_batch<T>({sized}, {0});
    auto logits = model.predict(img);
    for (auto& v : logits.values()) v = losses::detail::sigmoid(v);
    if (mh != s.height() || mw != s.width()) {
      Tape<T> tape(false);
      logits = ops::resize_bilinear(tape.constant(logits), s.height(), s.width()).value();
    }
    maps[i] = metrics::plane(logits);
  });
  std::map<std::string, metrics::Map> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) out.emplace(inputs[i].id, std::move(maps[i]));
  return out;
}

template <class T>
metrics::MetricReport evaluate(Model<T>& model, const std::vector<data::SegSample>& samples, Task task) {
  const auto preds = predict_maps(model, samples, task);
  std::map<std::string, metrics::Map> gts;
  for (const auto& s : samples) gts.emplace(s.id, metrics::plane(s.mask));
  return metrics::evaluate_dataset(preds, gts, false);
}

// ------------------------------------------------------------------ gradient audit

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Probes whose absolute error is at most this pass regardless of relative error.
  double floor = 1e-8;
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GroupResult {
  std::string name;
  double max_rel_error = 0;  // over probes above the absolute floor
  double max_abs_error = 0;
  double max_abs_grad = 0;  // largest analytic gradient among the probes
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // probes whose +/-h evaluations crossed a ReLU/max-pool kink
  bool finite = true;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GroupResult> groups;
  bool passed = true;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Adds N(0, stddev) noise to every trainable tensor so zero-initialised
/// branches carry gradient during an audit.
template <class T>
void perturb_trainable(ParamStore<T>& store, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : store.entries())
    if (e.trainable())
      for (auto& v : e.value.values()) v += static_cast<T>(rng.normal(0.0, stddev));
}

/// Central differences against the analytic gradient for every trainable
/// tensor; batch norm runs in eval mode. Frozen entries are never probed.
inline GradCheckReport grad_check(Model<double>& model, const LossFn<double>& loss, const Tensor<double>& image,
                                  const Tensor<double>& target, const GradCheckOptions& opt = {}) {
  auto evaluate_loss = [&](std::uint64_t* signature) {
    Tape<double> tape(false);
    tape.set_track_kinks(true);
    Context<double> ctx(tape, model.params(), Mode::eval);
    const double v = loss(model.forward(ctx, tape.constant(image)), target).value().total;
    if (signature) *signature = tape.decision_signature();
    return v;
  };

  std::map<std::string, Tensor<double>> analytic;
  std::uint64_t base_sig = 0;
  {
    Tape<double> tape(true);
    tape.set_track_kinks(true);
    Context<double> ctx(tape, model.params(), Mode::eval);
    auto terms = loss(model.forward(ctx, tape.constant(image)), target);
    base_sig = tape.decision_signature();
    tape.backward(terms.total);
    for (auto& [name, g] : ctx.gradients()) analytic.emplace(name, std::move(g));
  }

  GradCheckReport report;
  Rng rng(opt.seed);
  for (auto& e : model.params().entries()) {
    if (!e.trainable()) continue;
    GroupResult gr{e.name};
    auto it = analytic.find(e.name);
    // parameters outside the forward graph have an identically zero gradient
    const Tensor<double> g = it != analytic.end() ? it->second : Tensor<double>(e.value.shape());
    if (!g.all_finite()) {
      gr.finite = gr.passed = false;
      report.passed = false;
      report.groups.push_back(gr);
      continue;
    }
    std::vector<std::size_t> probes(e.value.numel());
    for (std::size_t i = 0; i < probes.size(); ++i) probes[i] = i;
    if (opt.max_per_tensor && probes.size() > opt.max_per_tensor) {
      std::shuffle(probes.begin(), probes.end(), rng.engine());
      probes.resize(opt.max_per_tensor);
      std::sort(probes.begin(), probes.end());
    }
    for (std::size_t i : probes) {
      const double orig = e.value[i];
      std::uint64_t sp = 0, sm = 0;
      e.value[i] = orig + opt.step;
      const double lp = evaluate_loss(&sp);
      e.value[i] = orig - opt.step;
      const double lm = evaluate_loss(&sm);
      e.value[i] = orig;
      if (sp != base_sig || sm != base_sig) {
        ++gr.skipped_kinks;
        continue;
      }
      const double num = (lp - lm) / (2 * opt.step);
      const double a = g[i];
      if (!std::isfinite(num)) {
        gr.finite = false;
        continue;
      }
      const double err = std::abs(a - num);
      gr.max_abs_error = std::max(gr.max_abs_error, err);
      gr.max_abs_grad = std::max(gr.max_abs_grad, std::abs(a));
      if (err > opt.floor) gr.max_rel_error = std::max(gr.max_rel_error, err / std::max(std::abs(a), std::abs(num)));
      ++gr.checked;
    }
    gr.passed = gr.finite && gr.max_rel_error <= opt.tolerance;
    report.passed = report.passed && gr.passed;
    report.max_rel_error = std::max(report.max_rel_error, gr.max_rel_error);
    report.checked += gr.checked;
    report.skipped_kinks += gr.skipped_kinks;
    report.groups.push_back(std::move(gr));
  }
  return report;
}

}  // namespace tssam::trainer
