#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rmap {

/// frames × rows × cols values, row-major. Used both for dBm ground truth and
/// for standardized stacks.
struct FrameStack {
  std::size_t frames = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  FrameStack() = default;
  FrameStack(std::size_t f, std::size_t r, std::size_t c, double fill = 0.0)
      : frames(f), rows(r), cols(c), values(f * r * c, fill) {}

  std::size_t frame_size() const { return rows * cols; }
  std::size_t size() const { return values.size(); }
  double& at(std::size_t f, std::size_t r, std::size_t c) { return values[(f * rows + r) * cols + c]; }
  double at(std::size_t f, std::size_t r, std::size_t c) const { return values[(f * rows + r) * cols + c]; }
  std::span<double> frame(std::size_t f) { return {values.data() + f * frame_size(), frame_size()}; }
  std::span<const double> frame(std::size_t f) const { return {values.data() + f * frame_size(), frame_size()}; }

  bool same_shape(const FrameStack& o) const { return frames == o.frames && rows == o.rows && cols == o.cols; }
  friend bool operator==(const FrameStack&, const FrameStack&) = default;
};

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// rows × cols binary grid.
struct GridMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> cells;

  GridMask() = default;
  GridMask(std::size_t r, std::size_t c, std::uint8_t fill = 0) : rows(r), cols(c), cells(r * c, fill) {}

  bool inside(int r, int c) const {
    return r >= 0 && c >= 0 && static_cast<std::size_t>(r) < rows && static_cast<std::size_t>(c) < cols;
  }
  std::uint8_t& at(std::size_t r, std::size_t c) { return cells[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return cells[r * cols + c]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1)); }
  double fraction() const { return cells.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(cells.size()); }
  friend bool operator==(const GridMask&, const GridMask&) = default;
};

using CoverageMask = GridMask;

inline void require_same_shape(const FrameStack& a, const FrameStack& b, const char* where) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(where) + ": stack shapes differ (" + std::to_string(a.frames) + "x" +
                                std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
                                std::to_string(b.frames) + "x" + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols) + ")");
  }
}

}  // namespace rmap
