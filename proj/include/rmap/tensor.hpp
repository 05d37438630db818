#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable value buffer. Operations that
// run while a Tape is active (see TapeScope) and touch at least one tensor
// with requires_grad set append a record to that tape; backward() replays the
// records in reverse and accumulates gradients into every participating
// tensor. Without an active tape, operations are plain evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rmap {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tape {
 public:
  struct Record {
    const char* op = "";
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    std::function<void(const std::vector<double>&)> backward;
  };

  void push(Record record) { records_.push_back(std::move(record)); }
  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

 private:
  std::vector<Record> records_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// Makes `tape` the recording target for the current thread until the scope
/// ends. Passing nullptr suspends recording (evaluation only).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape) : previous_(detail::active_tape) { detail::active_tape = tape; }
  explicit TapeScope(Tape& tape) : TapeScope(&tape) {}
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    validate_shape(shape);
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    if (!std::isfinite(fill)) throw NumericalError("tensor fill value is not finite");
  }

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericalError("tensor constructed with non-finite value");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = normal(rng);
    return Tensor(std::move(shape), std::move(values));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access; reserved for optimizers and deserialization.
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  /// Accumulated gradient; zeros if nothing has flowed into this tensor.
  std::vector<double> grad() const {
    if (node_->grad.size() != node_->value.size()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }
  std::span<double> grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Independent copy of the values with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const detail::NodePtr& node() const { return node_; }
  static Tensor from_node(detail::NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
  }

  detail::NodePtr node_;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

inline bool recording(const std::vector<Tensor>& inputs) {
  if (active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

inline Tensor make_output(Shape shape, std::vector<double> value, bool track) {
#ifdef RMAP_CHECK_FINITE
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced by tensor operation");
  }
#endif
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = track;
  return Tensor::from_node(std::move(node));
}

inline void record(const char* op, std::vector<NodePtr> inputs, const Tensor& out,
                   std::function<void(const std::vector<double>&)> backward) {
  active_tape->push(Tape::Record{op, std::move(inputs), out.node(), std::move(backward)});
}

// C[m×n] += op(A)·op(B) over row-major buffers.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class Fwd, class DA, class DB>
Tensor binary_broadcast(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not broadcast-compatible");
  }
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % inner]);
  const bool track = recording({&a, &b});
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    record(op, {a.node(), b.node()}, result,
           [an = a.node(), bn = b.node(), inner, da, db](const std::vector<double>& g) {
             const auto& x = an->value;
             const auto& y = bn->value;
             if (an->requires_grad) {
               auto& ga = an->grad_buffer();
               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i % inner]);
             }
             if (bn->requires_grad) {
               auto& gb = bn->grad_buffer();
               for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * db(x[i], y[i % inner]);
             }
           });
  }
  return result;
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const bool track = recording({&x});
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    record(op, {x.node()}, result, [xn = x.node(), deriv](const std::vector<double>& g) {
      auto& gx = xn->grad_buffer();
      const auto& v = xn->value;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(v[i]);
    });
  }
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b's shape may be a trailing suffix of a's shape.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.numel() < b.numel()) return add(b, a);
  return detail::binary_broadcast(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.numel() < b.numel()) return mul(b, a);
  return detail::binary_broadcast(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return c * v; }, [c](double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      "add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      "square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double v) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return detail::unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v) {
        const double t = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      });
}

/// Clamp to [lo, hi]; gradient passes only where the input is strictly inside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(Shape{1}, {s}, track);
  if (track) {
    detail::record("sum", {x.node()}, result, [xn = x.node()](const std::vector<double>& g) {
      auto& gx = xn->grad_buffer();
      for (double& v : gx) v += g[0];
    });
  }
  return result;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(std::move(shape), std::move(out), track);
  if (track) {
    detail::record("reshape", {x.node()}, result, [xn = x.node()](const std::vector<double>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.ndim() < 2) throw DimensionError("transpose needs >= 2 axes, got " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const std::size_t rows = s[s.size() - 2];
  const std::size_t cols = s[s.size() - 1];
  const std::size_t batch = x.numel() / (rows * cols);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[off + j * rows + i] = xv[off + i * cols + j];
  }
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    detail::record("transpose", {x.node()}, result,
                   [xn = x.node(), batch, rows, cols](const std::vector<double>& g) {
                     auto& gx = xn->grad_buffer();
                     for (std::size_t b = 0; b < batch; ++b) {
                       const std::size_t off = b * rows * cols;
                       for (std::size_t i = 0; i < rows; ++i)
                         for (std::size_t j = 0; j < cols; ++j)
                           gx[off + i * cols + j] += g[off + j * rows + i];
                     }
                   });
  }
  return result;
}

/// Selects rows of a 2-D tensor; indices may repeat (gradients accumulate).
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (x.ndim() != 2) throw DimensionError("gather_rows expects a 2-D tensor, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  std::vector<double> out(indices.size() * cols);
  auto xv = x.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) throw DimensionError("gather_rows index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(Shape{indices.size(), cols}, std::move(out), track);
  if (track) {
    detail::record("gather_rows", {x.node()}, result,
                   [xn = x.node(), indices, cols](const std::vector<double>& g) {
                     auto& gx = xn->grad_buffer();
                     for (std::size_t r = 0; r < indices.size(); ++r)
                       for (std::size_t c = 0; c < cols; ++c) gx[indices[r] * cols + c] += g[r * cols + c];
                   });
  }
  return result;
}

/// Stacks 2-D tensors with equal column counts vertically.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t split = a.numel();
  const bool track = detail::recording({&a, &b});
  Tensor result = detail::make_output(Shape{a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), track);
  if (track) {
    detail::record("concat_rows", {a.node(), b.node()}, result,
                   [an = a.node(), bn = b.node(), split](const std::vector<double>& g) {
                     if (an->requires_grad) {
                       auto& ga = an->grad_buffer();
                       for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
                     }
                     if (bn->requires_grad) {
                       auto& gb = bn->grad_buffer();
                       for (std::size_t i = split; i < g.size(); ++i) gb[i - split] += g[i];
                     }
                   });
  }
  return result;
}

/// Joins 2-D tensors with equal row counts side by side.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t rows = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows) {
      throw DimensionError("concat_cols: part " + shape_str(p.shape()) + " incompatible with " +
                           std::to_string(rows) + " rows");
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  std::size_t col0 = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * total + col0 + c] = pv[r * widths[k] + c];
    col0 += widths[k];
  }
  const bool track = detail::recording(parts);
  Tensor result = detail::make_output(Shape{rows, total}, std::move(out), track);
  if (track) {
    std::vector<detail::NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    detail::record("concat_cols", nodes, result,
                   [nodes, widths, rows, total](const std::vector<double>& g) {
                     std::size_t c0 = 0;
                     for (std::size_t k = 0; k < nodes.size(); ++k) {
                       if (nodes[k]->requires_grad) {
                         auto& gp = nodes[k]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < widths[k]; ++c)
                             gp[r * widths[k] + c] += g[r * total + c0 + c];
                       }
                       c0 += widths[k];
                     }
                   });
  }
  return result;
}

/// [B, N, heads·d] -> [B·heads, N, d]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.ndim() != 3 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: " + shape_str(x.shape()) + " with " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = x.dim(0), n = x.dim(1), width = x.dim(2), d = width / heads;
  auto index = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t k) {
    return std::pair{(b * n + t) * width + h * d + k, ((b * heads + h) * n + t) * d + k};
  };
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < d; ++k) {
          auto [src, dst] = index(b, h, t, k);
          out[dst] = xv[src];
        }
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(Shape{batch * heads, n, d}, std::move(out), track);
  if (track) {
    detail::record("split_heads", {x.node()}, result,
                   [xn = x.node(), index, batch, heads, n, d](const std::vector<double>& g) {
                     auto& gx = xn->grad_buffer();
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t h = 0; h < heads; ++h)
                         for (std::size_t t = 0; t < n; ++t)
                           for (std::size_t k = 0; k < d; ++k) {
                             auto [src, dst] = index(b, h, t, k);
                             gx[src] += g[dst];
                           }
                   });
  }
  return result;
}

/// [B·heads, N, d] -> [B, N, heads·d]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (x.ndim() != 3 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: " + shape_str(x.shape()) + " with " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = x.dim(0) / heads, n = x.dim(1), d = x.dim(2), width = heads * d;
  auto index = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t k) {
    return std::pair{((b * heads + h) * n + t) * d + k, (b * n + t) * width + h * d + k};
  };
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < d; ++k) {
          auto [src, dst] = index(b, h, t, k);
          out[dst] = xv[src];
        }
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(Shape{batch, n, width}, std::move(out), track);
  if (track) {
    detail::record("merge_heads", {x.node()}, result,
                   [xn = x.node(), index, batch, heads, n, d](const std::vector<double>& g) {
                     auto& gx = xn->grad_buffer();
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t h = 0; h < heads; ++h)
                         for (std::size_t t = 0; t < n; ++t)
                           for (std::size_t k = 0; k < d; ++k) {
                             auto [src, dst] = index(b, h, t, k);
                             gx[src] += g[dst];
                           }
                   });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra and normalization

/// Matrix product over the last two axes. `b` is either 2-D (shared by every
/// leading batch of `a`) or has the same leading axes as `a`.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  };
  if (a.ndim() < 2 || b.ndim() < 2) throw mismatch();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb) throw mismatch();
  const bool shared_b = b.ndim() == 2;
  if (!shared_b && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) {
    throw mismatch();
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (shared_b) {
    detail::gemm(av, bv, out.data(), batch * m, k, n, false, false);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::gemm(av + i * m * k, bv + i * k * n, out.data() + i * m * n, m, k, n, false, false);
  }
  const bool track = detail::recording({&a, &b});
  Tensor result = detail::make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    detail::record("matmul", {a.node(), b.node()}, result,
                   [an = a.node(), bn = b.node(), batch, m, k, n, shared_b](const std::vector<double>& g) {
                     const double* x = an->value.data();
                     const double* y = bn->value.data();
                     if (an->requires_grad) {
                       double* ga = an->grad_buffer().data();
                       if (shared_b) {
                         detail::gemm(g.data(), y, ga, batch * m, n, k, false, true);
                       } else {
                         for (std::size_t i = 0; i < batch; ++i)
                           detail::gemm(g.data() + i * m * n, y + i * k * n, ga + i * m * k, m, n, k, false, true);
                       }
                     }
                     if (bn->requires_grad) {
                       double* gb = bn->grad_buffer().data();
                       if (shared_b) {
                         detail::gemm(x, g.data(), gb, k, batch * m, n, true, false);
                       } else {
                         for (std::size_t i = 0; i < batch; ++i)
                           detail::gemm(x + i * m * k, g.data() + i * m * n, gb + i * k * n, k, m, n, true, false);
                       }
                     }
                   });
  }
  return result;
}

/// exp(x - max) / sum exp(x - max) along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw DimensionError("softmax axis out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  const bool track = detail::recording({&x});
  Tensor result = detail::make_output(s, std::move(out), track);
  if (track) {
    detail::record("softmax", {x.node()}, result,
                   [xn = x.node(), yn = std::weak_ptr<detail::Node>(result.node()), outer, inner,
                    len](const std::vector<double>& g) {
                     auto y_node = yn.lock();
                     const auto& y = y_node->value;
                     auto& gx = xn->grad_buffer();
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t in = 0; in < inner; ++in) {
                         const std::size_t base = o * len * inner + in;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t idx = base + j * inner;
                           gx[idx] += y[idx] * (g[idx] - dot);
                         }
                       }
                   });
  }
  return result;
}

/// (x - mean) / sqrt(var + eps) * gain + bias over the last axis.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(rows);
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(width);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < width; ++c) {
      const double h = (row[c] - mu) * rstd[r];
      xhat[r * width + c] = h;
      out[r * width + c] = h * gv[c] + bv[c];
    }
  }
  const bool track = detail::recording({&x, &gain, &bias});
  Tensor result = detail::make_output(x.shape(), std::move(out), track);
  if (track) {
    detail::record(
        "layer_norm", {x.node(), gain.node(), bias.node()}, result,
        [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat), rstd = std::move(rstd), rows,
         width](const std::vector<double>& g) {
          const auto& gv = gn->value;
          if (gn->requires_grad || bn->requires_grad) {
            auto& gg = gn->grad_buffer();
            auto& gb = bn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < width; ++c) {
                gg[c] += g[r * width + c] * xhat[r * width + c];
                gb[c] += g[r * width + c];
              }
          }
          if (xn->requires_grad) {
            auto& gx = xn->grad_buffer();
            const double inv_w = 1.0 / static_cast<double>(width);
            for (std::size_t r = 0; r < rows; ++r) {
              double mean_d = 0.0, mean_dx = 0.0;
              for (std::size_t c = 0; c < width; ++c) {
                const double d = g[r * width + c] * gv[c];
                mean_d += d;
                mean_dx += d * xhat[r * width + c];
              }
              mean_d *= inv_w;
              mean_dx *= inv_w;
              for (std::size_t c = 0; c < width; ++c) {
                const double d = g[r * width + c] * gv[c];
                gx[r * width + c] += rstd[r] * (d - mean_d - xhat[r * width + c] * mean_dx);
              }
            }
          }
        });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Differentiation

/// Populates gradients of every tensor reachable from `loss` on `tape`.
/// Gradients accumulate; call zero_grad on parameters between steps.
inline void backward(const Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer()[0] += 1.0;
  const auto& records = tape.records();
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    const auto& out = it->output;
    if (out->grad.size() != out->value.size()) continue;
    it->backward(out->grad);
  }
}

}  // namespace rmap
