#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "rmap/tensor.hpp"

namespace rmap {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of `params` from their accumulated
/// gradients. Moment buffers are created on the first call.
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment size mismatch for parameter " + std::to_string(i) + " of shape " +
                           shape_str(params[i].shape()));
    }
  }
  ++state.step;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<double> g = params[i].grad();
    auto values = params[i].mutable_values();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
      const double mhat = m[j] / correction1;
      const double vhat = v[j] / correction2;
      values[j] -= h.learning_rate * mhat / (std::sqrt(vhat) + h.epsilon);
    }
  }
}

inline void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of sum(fn(inputs) ⊙ R), for a fixed random
/// R, against central finite differences. Inputs are randomized from `rng`.
/// Relative error per entry is |a - n| / max(|a| + |n|, 1e-5).
inline GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                  const std::vector<Shape>& input_shapes, double tolerance,
                                  std::mt19937_64& rng, double step = 1e-5) {
  std::vector<Tensor> inputs;
  for (const Shape& s : input_shapes) inputs.push_back(Tensor::randn(s, rng).set_requires_grad(true));

  Tensor probe;
  {
    TapeScope off(nullptr);
    probe = Tensor::randn(fn(inputs).shape(), rng);
  }
  auto objective = [&](const std::vector<Tensor>& xs) { return sum(mul(fn(xs), probe)); };

  Tape tape;
  {
    TapeScope scope(tape);
    backward(tape, objective(inputs));
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  TapeScope off(nullptr);
  for (Tensor& x : inputs) {
    const std::vector<double> analytic = x.grad();
    auto values = x.mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + step;
      const double plus = objective(inputs).item();
      values[j] = saved - step;
      const double minus = objective(inputs).item();
      values[j] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double denom = std::max(std::abs(analytic[j]) + std::abs(numeric), 1e-5);
      report.max_relative_error = std::max(report.max_relative_error, std::abs(analytic[j] - numeric) / denom);
      ++report.entries_checked;
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace rmap
