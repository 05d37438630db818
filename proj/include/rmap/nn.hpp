#pragma once

// Small neural building blocks shared by the reconstructor and the planner.
// Every module exposes visit(prefix, fn), which hands each parameter tensor
// (by reference) to fn together with a stable dotted name.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "rmap/tensor.hpp"

namespace rmap::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline Tensor trainable(Tensor t) { return t.set_requires_grad(true); }

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng, double stddev = 0.02) {
    return {trainable(Tensor::randn({in, out}, rng, stddev)), trainable(Tensor({out}, 0.0))};
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join(prefix, "weight"), weight);
    f(join(prefix, "bias"), bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNorm init(std::size_t width) {
    return {trainable(Tensor({width}, 1.0)), trainable(Tensor({width}, 0.0)), 1e-5};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join(prefix, "gain"), gain);
    f(join(prefix, "bias"), bias);
  }
};

/// softmax(q·kᵀ / sqrt(d) + mask)·v over [B, N, d] operands. The optional
/// additive mask has the score shape [B, Nq, Nk].
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor* additive_mask = nullptr) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  if (additive_mask != nullptr) scores = add(scores, *additive_mask);
  return matmul(softmax(scores, scores.ndim() - 1), v);
}

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention init(std::size_t width, std::size_t heads, std::mt19937_64& rng, double stddev = 0.02) {
    if (width % heads != 0) throw DimensionError("attention width must be divisible by head count");
    return {Linear::init(width, width, rng, stddev), Linear::init(width, width, rng, stddev),
            Linear::init(width, width, rng, stddev), Linear::init(width, width, rng, stddev), heads};
  }

  /// Self-attention over x: [B, N, width]. Heads are computed on disjoint
  /// slices of the projected width, concatenated, and projected again.
  Tensor operator()(const Tensor& x) const {
    Tensor q = split_heads(query(x), heads);
    Tensor k = split_heads(key(x), heads);
    Tensor v = split_heads(value(x), heads);
    return output(merge_heads(scaled_dot_attention(q, k, v), heads));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    query.visit(join(prefix, "query"), f);
    key.visit(join(prefix, "key"), f);
    value.visit(join(prefix, "value"), f);
    output.visit(join(prefix, "output"), f);
  }
};

/// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm norm1;
  MultiHeadAttention attention;
  LayerNorm norm2;
  Linear expand;
  Linear contract;

  static TransformerBlock init(std::size_t width, std::size_t heads, std::size_t expansion, std::mt19937_64& rng,
                               double stddev = 0.02) {
    TransformerBlock b{LayerNorm::init(width), MultiHeadAttention::init(width, heads, rng, stddev),
                       LayerNorm::init(width), Linear::init(width, width * expansion, rng, stddev),
                       Linear::init(width * expansion, width, rng, stddev)};
    return b;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = add(x, attention(norm1(x)));
    return add(h, contract(gelu(expand(norm2(h)))));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(join(prefix, "norm1"), f);
    attention.visit(join(prefix, "attn"), f);
    norm2.visit(join(prefix, "norm2"), f);
    expand.visit(join(prefix, "ffn1"), f);
    contract.visit(join(prefix, "ffn2"), f);
  }
};

/// Sinusoidal encoding of position n: even entries sin(n / base^(2k/D)),
/// odd entries cos of the same argument.
inline std::vector<double> positional_encoding(std::size_t n, std::size_t width, double base = 10000.0) {
  if (width % 2 != 0) throw DimensionError("positional encoding width must be even");
  std::vector<double> pe(width);
  for (std::size_t k = 0; k < width / 2; ++k) {
    const double arg = static_cast<double>(n) / std::pow(base, 2.0 * static_cast<double>(k) / static_cast<double>(width));
    pe[2 * k] = std::sin(arg);
    pe[2 * k + 1] = std::cos(arg);
  }
  return pe;
}

inline Tensor positional_table(std::size_t count, std::size_t width, double base = 10000.0) {
  std::vector<double> values;
  values.reserve(count * width);
  for (std::size_t n = 0; n < count; ++n) {
    auto row = positional_encoding(n, width, base);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({count, width}, std::move(values));
}

template <class Module>
ParamList parameters(Module& module, const std::string& prefix = "") {
  ParamList out;
  module.visit(prefix, [&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

template <class Module>
std::vector<Tensor> parameter_tensors(Module& module) {
  std::vector<Tensor> out;
  module.visit("", [&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

/// Copy with freshly allocated parameter storage.
template <class Module>
Module deep_copy(const Module& module) {
  Module copy = module;
  copy.visit("", [](const std::string&, Tensor& t) { t = trainable(t.detach()); });
  return copy;
}

/// target <- tau·net + (1 - tau)·target, parameter by parameter.
template <class Module>
void soft_update(Module& net, Module& target, double tau) {
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("soft_update: tau must lie in [0, 1]");
  std::vector<Tensor> src = parameter_tensors(net);
  std::vector<Tensor> dst = parameter_tensors(target);
  if (src.size() != dst.size()) throw DimensionError("soft_update: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].shape() != dst[i].shape()) {
      throw DimensionError("soft_update: shape " + shape_str(src[i].shape()) + " vs " + shape_str(dst[i].shape()));
    }
    auto s = src[i].values();
    auto d = dst[i].mutable_values();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = tau * s[j] + (1.0 - tau) * d[j];
  }
}

}  // namespace rmap::nn
