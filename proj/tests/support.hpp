#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tssam/autograd.hpp"
#include "tssam/config.hpp"
#include "tssam/ops.hpp"
#include "tssam/params.hpp"

namespace testing_support {

using namespace tssam;

inline ModelConfig toy_config() { return ModelConfig{}; }

struct FdResult {
  double max_rel = 0;   // over probes whose absolute error exceeds the floor
  double max_abs = 0;
  double max_grad = 0;  // largest analytic gradient magnitude seen
  std::size_t probes = 0;
};

/// Central differences for every entry named in `names` (all parameters when
/// empty). `f` must build a scalar from the store inside the given context.
inline FdResult fd_check(ParamStore<double>& store, const std::function<Var<double>(Context<double>&)>& f,
                         std::vector<std::string> names = {}, Mode mode = Mode::eval, double h = 1e-5,
                         double floor = 1e-8) {
  if (names.empty())
    for (const auto& e : store.entries())
      if (e.trainable()) names.push_back(e.name);
  std::map<std::string, Tensor<double>> grads;
  {
    Tape<double> tape;
    Context<double> ctx(tape, store, mode);
    tape.backward(f(ctx));
    for (auto& [n, g] : ctx.gradients()) grads.emplace(n, std::move(g));
  }
  auto eval = [&] {
    std::vector<Tensor<double>> buffers;  // keep running statistics fixed across probes
    for (const auto& e : store.entries())
      if (e.kind == EntryKind::buffer) buffers.push_back(e.value);
    Tape<double> tape(false);
    Context<double> ctx(tape, store, mode);
    const double v = f(ctx).value()[0];
    std::size_t k = 0;
    for (auto& e : store.entries())
      if (e.kind == EntryKind::buffer) e.value = buffers[k++];
    return v;
  };
  FdResult r;
  for (const auto& name : names) {
    auto& val = store.value(name);
    const auto it = grads.find(name);
    for (std::size_t i = 0; i < val.numel(); ++i) {
      const double orig = val[i];
      val[i] = orig + h;
      const double lp = eval();
      val[i] = orig - h;
      const double lm = eval();
      val[i] = orig;
      const double num = (lp - lm) / (2 * h);
      const double a = it == grads.end() ? 0.0 : it->second[i];
      const double err = std::abs(a - num);
      r.max_abs = std::max(r.max_abs, err);
      r.max_grad = std::max(r.max_grad, std::abs(a));
      if (err > floor) r.max_rel = std::max(r.max_rel, err / std::max(std::abs(a), std::abs(num)));
      ++r.probes;
    }
  }
  return r;
}

/// Generic scalar read-out: mean(out * fixed random weights).
inline Var<double> readout(Var<double> out, std::uint64_t seed = 99) {
  auto w = out.tape->constant(oracle::random(out.shape(), seed));
  return ops::mean_all(ops::mul(out, w));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tssam_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
