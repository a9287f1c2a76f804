#pragma once

// Segmentation objectives on raw logits (B,1,H,W) against binary targets.
// Every loss is evaluated from logits directly (softplus form), never as
// log(sigmoid(.)).

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tssam/autograd.hpp"
#include "tssam/config.hpp"

namespace tssam::losses {

inline constexpr double kIouSmooth = 1.0;

template <class T>
void validate_target(const Shape& logits, const Tensor<T>& target, const char* who) {
  if (logits != target.shape())
    throw ShapeError(std::string(who) + ": logits " + to_string(logits) + " vs target " + to_string(target.shape()));
  for (T v : target.values())
    if (v != T(0) && v != T(1)) throw ValidationError(std::string(who) + ": target values must be 0 or 1");
}

namespace detail {

template <class T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <class T>
T sigmoid(T z) {
  return z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

/// Per-element weights of the balanced BCE; all ones when a class is absent.
template <class T>
std::vector<T> balance_weights(const Tensor<T>& y) {
  std::size_t pos = 0;
  for (T v : y.values()) pos += v == T(1);
  const std::size_t neg = y.numel() - pos;
  std::vector<T> w(y.numel(), T(1));
  if (pos == 0 || neg == 0) return w;
  const T alpha = T(neg) / T(pos + neg);
  for (std::size_t i = 0; i < y.numel(); ++i) w[i] = y[i] == T(1) ? alpha : T(1) - alpha;
  return w;
}

template <class T>
Var<T> weighted_bce(Var<T> logits, const Tensor<T>& y, std::vector<T> w) {
  const auto& z = logits.value();
  const T n = T(z.numel());
  T s = 0;
  // -[y log p + (1-y) log(1-p)] = softplus(z) - y z
  for (std::size_t i = 0; i < z.numel(); ++i) s += w[i] * (detail::softplus(z[i]) - y[i] * z[i]);
  return logits.tape->record(Tensor<T>({1}, s / n), {logits},
                             [logits, y, w = std::move(w), n](Tape<T>& t, std::size_t self) {
                               const T g = t.grad(self)[0];
                               const auto& z = t.value(logits);
                               auto& gz = t.grad(logits);
                               for (std::size_t i = 0; i < z.numel(); ++i)
                                 gz[i] += g * w[i] * (detail::sigmoid(z[i]) - y[i]) / n;
                             });
}

}  // namespace detail

/// Mean binary cross-entropy.
template <class T>
Var<T> bce(Var<T> logits, const Tensor<T>& target) {
  validate_target(logits.shape(), target, "bce_loss");
  return detail::weighted_bce(logits, target, std::vector<T>(target.numel(), T(1)));
}

/// Soft IoU loss, 1 - (I + 1) / (U + 1), computed per image and averaged over the batch.
template <class T>
Var<T> iou(Var<T> logits, const Tensor<T>& target) {
  validate_target(logits.shape(), target, "iou_loss");
  const auto& z = logits.value();
  const std::size_t b = z.dim(0), per = z.numel() / b;
  const T eps = T(kIouSmooth);
  std::vector<T> inter(b, T(0)), uni(b, T(0));
  T total = 0;
  for (std::size_t n = 0; n < b; ++n) {
    T i = 0, sp = 0, sy = 0;
    for (std::size_t k = n * per; k < (n + 1) * per; ++k) {
      const T p = detail::sigmoid(z[k]);
      i += p * target[k];
      sp += p;
      sy += target[k];
    }
    inter[n] = i;
    uni[n] = sp + sy - i;
    total += T(1) - (i + eps) / (uni[n] + eps);
  }
  return logits.tape->record(
      Tensor<T>({1}, total / T(b)), {logits},
      [logits, target, b, per, eps, inter = std::move(inter), uni = std::move(uni)](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / T(b);
        const auto& z = t.value(logits);
        auto& gz = t.grad(logits);
        for (std::size_t n = 0; n < b; ++n) {
          const T num = inter[n] + eps, den = uni[n] + eps;
          for (std::size_t k = n * per; k < (n + 1) * per; ++k) {
            const T p = detail::sigmoid(z[k]);
            const T y = target[k];
            const T dratio = (y * den - num * (T(1) - y)) / (den * den);
            gz[k] += -g * dratio * p * (T(1) - p);
          }
        }
      });
}

/// Class-balanced BCE: positives weighted by N_neg/N, negatives by N_pos/N over
/// the whole batch; plain BCE when the batch target has a single class.
template <class T>
Var<T> bbce(Var<T> logits, const Tensor<T>& target) {
  validate_target(logits.shape(), target, "bbce_loss");
  return detail::weighted_bce(logits, target, detail::balance_weights(target));
}

template <class T>
struct LossValue {
  T total{};
  std::map<std::string, T> components;
};

/// A differentiable total plus its named parts.
template <class T>
struct LossTerms {
  Var<T> total;
  std::vector<std::pair<std::string, Var<T>>> parts;

  LossValue<T> value() const {
    LossValue<T> v{total.value()[0], {}};
    for (const auto& [name, var] : parts) v.components[name] = var.value()[0];
    return v;
  }
};

template <class T>
Var<T> add_scalars(Var<T> a, Var<T> b) {
  return a.tape->record(Tensor<T>({1}, a.value()[0] + b.value()[0]), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    if (t.requires_grad(a)) t.grad(a)[0] += g;
    if (t.requires_grad(b)) t.grad(b)[0] += g;
  });
}

/// BCE + IoU with equal weights.
template <class T>
LossTerms<T> bce_iou(Var<T> logits, const Tensor<T>& target) {
  auto b = bce(logits, target);
  auto i = iou(logits, target);
  return {add_scalars(b, i), {{"bce", b}, {"iou", i}}};
}

template <class T>
LossTerms<T> balanced(Var<T> logits, const Tensor<T>& target) {
  auto b = bbce(logits, target);
  return {b, {{"bbce", b}}};
}

/// COD and SOD train on BCE + IoU; shadow detection on balanced BCE.
template <class T>
LossTerms<T> for_task(Task task, Var<T> logits, const Tensor<T>& target) {
  return task == Task::shadow ? balanced(logits, target) : bce_iou(logits, target);
}

// Convenience evaluators on plain tensors.

template <class T>
T bce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  Tape<T> t(false);
  return bce(t.constant(logits), target).value()[0];
}

template <class T>
T iou_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  Tape<T> t(false);
  return iou(t.constant(logits), target).value()[0];
}

template <class T>
T bbce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  Tape<T> t(false);
  return bbce(t.constant(logits), target).value()[0];
}

template <class T>
LossValue<T> bce_iou_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  Tape<T> t(false);
  return bce_iou(t.constant(logits), target).value();
}

}  // namespace tssam::losses
