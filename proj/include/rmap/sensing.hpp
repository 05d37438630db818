#pragma once

// Sensor layouts, coverage masks, sensed stacks and reconstruction metrics.
// Learning and metrics work on standardized stacks: (dBm - mean) / std with
// unobserved cells encoded as 0.

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "rmap/grid.hpp"

namespace rmap::sensing {

inline constexpr int kDynamicRadius = 1;  // 3×3 footprint
inline constexpr int kStaticRadius = 0;   // 1×1 footprint

struct SensorLayout {
  std::vector<Cell> static_cells;
  std::vector<Cell> dynamic_cells;
};

/// Evenly spaced static sensors at spacing/2 + k·spacing on both axes.
/// spacing == 0 means no static sensors.
inline std::vector<Cell> static_layout(std::size_t spacing, std::size_t rows, std::size_t cols) {
  std::vector<Cell> out;
  if (spacing == 0) return out;
  if (spacing > std::min(rows, cols)) throw std::invalid_argument("static_layout: spacing exceeds grid");
  for (std::size_t r = spacing / 2; r < rows; r += spacing)
    for (std::size_t c = spacing / 2; c < cols; c += spacing) out.push_back({static_cast<int>(r), static_cast<int>(c)});
  return out;
}

/// Marks the Chebyshev neighborhood of `center` with the given radius,
/// clipped at the grid border.
inline void mark_footprint(CoverageMask& mask, Cell center, int radius) {
  for (int dr = -radius; dr <= radius; ++dr)
    for (int dc = -radius; dc <= radius; ++dc) {
      const int r = center.row + dr;
      const int c = center.col + dc;
      if (mask.inside(r, c)) mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1;
    }
}

inline CoverageMask coverage_mask(const SensorLayout& layout, std::size_t rows, std::size_t cols) {
  CoverageMask mask(rows, cols);
  for (const Cell& c : layout.static_cells) {
    if (!mask.inside(c.row, c.col)) throw std::invalid_argument("coverage_mask: static sensor outside grid");
    mark_footprint(mask, c, kStaticRadius);
  }
  for (const Cell& c : layout.dynamic_cells) {
    if (!mask.inside(c.row, c.col)) throw std::invalid_argument("coverage_mask: dynamic sensor outside grid");
    mark_footprint(mask, c, kDynamicRadius);
  }
  return mask;
}

struct Standardizer {
  double mean = 0.0;
  double stddev = 1.0;

  static Standardizer fit(const std::vector<const FrameStack*>& stacks) {
    double total = 0.0;
    std::size_t n = 0;
    for (const FrameStack* s : stacks) {
      total = std::accumulate(s->values.begin(), s->values.end(), total);
      n += s->size();
    }
    if (n == 0) throw std::invalid_argument("Standardizer::fit: no values");
    const double mu = total / static_cast<double>(n);
    double sq = 0.0;
    for (const FrameStack* s : stacks)
      for (double v : s->values) sq += (v - mu) * (v - mu);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    return {mu, sd > 0.0 ? sd : 1.0};
  }

  FrameStack standardize(const FrameStack& dbm) const {
    FrameStack out = dbm;
    for (double& v : out.values) v = (v - mean) / stddev;
    return out;
  }

  FrameStack destandardize(const FrameStack& z) const {
    FrameStack out = z;
    for (double& v : out.values) v = v * stddev + mean;
    return out;
  }
};

/// Frame-wise Hadamard product of a standardized stack with the mask.
inline FrameStack apply_mask(const FrameStack& standardized, const CoverageMask& mask) {
  if (standardized.rows != mask.rows || standardized.cols != mask.cols) {
    throw std::invalid_argument("apply_mask: mask extents do not match stack");
  }
  FrameStack out = standardized;
  for (std::size_t f = 0; f < out.frames; ++f) {
    auto frame = out.frame(f);
    for (std::size_t i = 0; i < frame.size(); ++i)
      if (mask.cells[i] == 0) frame[i] = 0.0;
  }
  return out;
}

/// Mean squared difference over every entry of two equally shaped stacks.
inline double recon_mse(const FrameStack& truth, const FrameStack& recon) {
  require_same_shape(truth, recon, "recon_mse");
  double sq = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth.values[i] - recon.values[i];
    sq += d * d;
  }
  return sq / static_cast<double>(truth.size());
}

inline double cumulative_error(const std::vector<double>& per_slot) {
  return std::accumulate(per_slot.begin(), per_slot.end(), 0.0);
}

/// Fills every unobserved cell with the mean of the observed cells of the
/// same frame; observed cells pass through.
inline FrameStack mean_fill(const FrameStack& sensed, const CoverageMask& mask) {
  const std::size_t observed = mask.count();
  if (observed == 0) throw std::invalid_argument("mean_fill: empty mask");
  FrameStack out = sensed;
  for (std::size_t f = 0; f < out.frames; ++f) {
    auto frame = out.frame(f);
    double total = 0.0;
    for (std::size_t i = 0; i < frame.size(); ++i)
      if (mask.cells[i]) total += frame[i];
    const double fill = total / static_cast<double>(observed);
    for (std::size_t i = 0; i < frame.size(); ++i)
      if (!mask.cells[i]) frame[i] = fill;
  }
  return out;
}

/// Random deployment realizing a target covered-cell fraction rho: 3×3
/// sensors at random centers while they fit under the target, then 1×1
/// sensors on uncovered cells until exactly round(rho·rows·cols) cells are
/// covered.
inline SensorLayout random_layout(std::mt19937_64& rng, double rho, std::size_t rows, std::size_t cols) {
  if (!(rho > 0.0) || rho > 1.0) throw std::invalid_argument("random_layout: rho must lie in (0, 1]");
  const std::size_t target =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(rho * static_cast<double>(rows * cols))));
  SensorLayout layout;
  CoverageMask mask(rows, cols);
  std::uniform_int_distribution<int> row_dist(0, static_cast<int>(rows) - 1);
  std::uniform_int_distribution<int> col_dist(0, static_cast<int>(cols) - 1);
  for (int attempts = 0; attempts < 64; ++attempts) {
    const Cell c{row_dist(rng), col_dist(rng)};
    CoverageMask trial = mask;
    mark_footprint(trial, c, kDynamicRadius);
    if (trial.count() > target) continue;
    mask = std::move(trial);
    layout.dynamic_cells.push_back(c);
    if (target - mask.count() < 9) break;
  }
  std::vector<std::size_t> free_cells;
  for (std::size_t i = 0; i < mask.cells.size(); ++i)
    if (!mask.cells[i]) free_cells.push_back(i);
  std::shuffle(free_cells.begin(), free_cells.end(), rng);
  for (std::size_t i = 0; mask.count() < target && i < free_cells.size(); ++i) {
    const Cell c{static_cast<int>(free_cells[i] / cols), static_cast<int>(free_cells[i] % cols)};
    mark_footprint(mask, c, kStaticRadius);
    layout.static_cells.push_back(c);
  }
  return layout;
}

}  // namespace rmap::sensing
