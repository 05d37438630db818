#pragma once

// Ordinary kriging with an exponential covariance kernel, used as the
// classical per-frame interpolation baseline.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rmap/grid.hpp"

namespace rmap::kriging {

struct Sample {
  double x = 0.0;
  double y = 0.0;
  double value = 0.0;
};

class KrigingModel {
 public:
  /// Assembles and factorizes the kriging system for k(d) = variance·exp(-d/ℓ)
  /// plus `nugget` on the diagonal. A failed factorization retries with the
  /// nugget scaled by 10, up to three times.
  static KrigingModel fit(std::vector<Sample> samples, double variance, double length_scale, double nugget) {
    if (samples.empty()) throw std::invalid_argument("kriging fit: need at least one sample");
    if (!(variance > 0.0) || !(length_scale > 0.0) || !(nugget > 0.0)) {
      throw std::invalid_argument("kriging fit: variance, length scale and nugget must be positive");
    }
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (samples[i].x == samples[j].x && samples[i].y == samples[j].y) {
          throw std::invalid_argument("kriging fit: duplicate sample positions");
        }

    KrigingModel m;
    m.samples_ = std::move(samples);
    m.variance_ = variance;
    m.length_scale_ = length_scale;
    const Eigen::Index n = static_cast<Eigen::Index>(m.samples_.size());
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) k(i, j) = k(j, i) = m.kernel(m.samples_[i], m.samples_[j].x, m.samples_[j].y);

    double current = nugget;
    for (int attempt = 0; attempt <= 3; ++attempt, current *= 10.0) {
      Eigen::MatrixXd system = k;
      system.diagonal().array() += current;
      m.llt_.compute(system);
      if (m.llt_.info() == Eigen::Success) {
        m.nugget_ = current;
        m.finish();
        return m;
      }
    }
    throw std::runtime_error("kriging fit: system stays singular after nugget escalation");
  }

  /// Ordinary-kriging weights for a query; they sum to one.
  Eigen::VectorXd weights(double x, double y) const {
    const Eigen::VectorXd kq = cross(x, y);
    const Eigen::VectorXd kinv_k = llt_.solve(kq);
    return kinv_k + kinv_one_ * ((1.0 - kinv_k.sum()) / one_kinv_one_);
  }

  double predict(double x, double y) const { return mean_ + cross(x, y).dot(alpha_); }

  double nugget() const { return nugget_; }
  double mean() const { return mean_; }
  std::size_t size() const { return samples_.size(); }

 private:
  double kernel(const Sample& s, double x, double y) const {
    return variance_ * std::exp(-std::hypot(s.x - x, s.y - y) / length_scale_);
  }

  Eigen::VectorXd cross(double x, double y) const {
    Eigen::VectorXd kq(static_cast<Eigen::Index>(samples_.size()));
    for (std::size_t i = 0; i < samples_.size(); ++i) kq(static_cast<Eigen::Index>(i)) = kernel(samples_[i], x, y);
    return kq;
  }

  void finish() {
    const Eigen::Index n = static_cast<Eigen::Index>(samples_.size());
    Eigen::VectorXd values(n);
    for (Eigen::Index i = 0; i < n; ++i) values(i) = samples_[static_cast<std::size_t>(i)].value;
    kinv_one_ = llt_.solve(Eigen::VectorXd::Ones(n));
    one_kinv_one_ = kinv_one_.sum();
    mean_ = kinv_one_.dot(values) / one_kinv_one_;
    alpha_ = llt_.solve((values.array() - mean_).matrix());
  }

  std::vector<Sample> samples_;
  double variance_ = 1.0;
  double length_scale_ = 1.0;
  double nugget_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd kinv_one_;
  double one_kinv_one_ = 1.0;
  double mean_ = 0.0;
  Eigen::VectorXd alpha_;
};

struct KrigeOptions {
  double cell_x_m = 4.0;
  double cell_y_m = 4.0;
  double length_scale_m = 50.0;
  double nugget_fraction = 1e-8;  // of the per-frame sample variance
};

/// Per frame: fit on observed cells (kernel variance = sample variance of the
/// observations), predict every unobserved cell, copy observed cells through.
inline FrameStack krige_stack(const FrameStack& sensed, const CoverageMask& mask, const KrigeOptions& opts) {
  if (mask.rows != sensed.rows || mask.cols != sensed.cols) throw std::invalid_argument("krige_stack: mask shape");
  if (mask.count() == 0) throw std::invalid_argument("krige_stack: empty mask");
  auto x_of = [&](std::size_t r) { return (static_cast<double>(r) + 0.5) * opts.cell_x_m; };
  auto y_of = [&](std::size_t c) { return (static_cast<double>(c) + 0.5) * opts.cell_y_m; };
  FrameStack out = sensed;
  for (std::size_t f = 0; f < sensed.frames; ++f) {
    std::vector<Sample> samples;
    for (std::size_t r = 0; r < sensed.rows; ++r)
      for (std::size_t c = 0; c < sensed.cols; ++c)
        if (mask.at(r, c)) samples.push_back({x_of(r), y_of(c), sensed.at(f, r, c)});
    double mu = 0.0;
    for (const Sample& s : samples) mu += s.value;
    mu /= static_cast<double>(samples.size());
    double var = 0.0;
    for (const Sample& s : samples) var += (s.value - mu) * (s.value - mu);
    var = samples.size() > 1 ? var / static_cast<double>(samples.size() - 1) : 0.0;
    if (!(var > 1e-12)) var = 1.0;
    const KrigingModel model = KrigingModel::fit(std::move(samples), var, opts.length_scale_m, opts.nugget_fraction * var);
    for (std::size_t r = 0; r < sensed.rows; ++r)
      for (std::size_t c = 0; c < sensed.cols; ++c)
        if (!mask.at(r, c)) out.at(f, r, c) = model.predict(x_of(r), y_of(c));
  }
  return out;
}

}  // namespace rmap::kriging
