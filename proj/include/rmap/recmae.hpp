#pragma once

// Dual-mask masked autoencoder for spatio-temporal radio stacks.
//
// Training: pixel-level masking simulates sparse sensors, the masked stack is
// cut into tubelet tokens, a random subset of tokens is hidden from the
// encoder, and the decoder (with a shared learned mask token) reconstructs
// every tubelet. Inference feeds the sensed stack through the same path.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmap/grid.hpp"
#include "rmap/nn.hpp"
#include "rmap/optim.hpp"
#include "rmap/sensing.hpp"
#include "rmap/tensor.hpp"

namespace rmap::recmae {

struct Tubelet {
  std::size_t t = 2;
  std::size_t h = 8;
  std::size_t w = 8;
  std::size_t volume() const { return t * h * w; }
};

struct RecMAEConfig {
  std::size_t frames = 16;
  std::size_t rows = 64;
  std::size_t cols = 64;
  Tubelet tubelet{};
  std::size_t embed_dim = 192;
  std::size_t encoder_depth = 12;
  std::size_t decoder_depth = 12;
  std::size_t heads = 12;
  std::size_t ffn_expansion = 4;
  double patch_mask_ratio = 0.75;
  double pixel_mask_ratio = 0.90;
  double pe_base = 10000.0;
  double init_std = 0.02;
  bool masked_only_loss = false;
  double structured_mask_prob = 0.5;

  std::size_t patch_count() const {
    return (frames / tubelet.t) * (rows / tubelet.h) * (cols / tubelet.w);
  }

  void validate() const {
    if (tubelet.t == 0 || tubelet.h == 0 || tubelet.w == 0 || frames % tubelet.t || rows % tubelet.h ||
        cols % tubelet.w) {
      throw std::invalid_argument("recmae: frames/rows/cols must be divisible by the tubelet extents");
    }
    if (embed_dim == 0 || heads == 0 || embed_dim % heads || embed_dim % 2) {
      throw std::invalid_argument("recmae: embed_dim must be even and divisible by heads");
    }
    if (!(patch_mask_ratio > 0.0 && patch_mask_ratio < 1.0) || !(pixel_mask_ratio > 0.0 && pixel_mask_ratio < 1.0)) {
      throw std::invalid_argument("recmae: mask ratios must lie in (0, 1)");
    }
  }
};

/// Tubelet tokens in (t', h', w') raster order, each holding its values in
/// (dt, dh, dw) raster order.
struct PatchSequence {
  std::size_t count = 0;
  std::size_t length = 0;
  std::array<std::size_t, 3> blocks{};  // T', H', W'
  Tubelet tubelet{};
  std::vector<std::array<std::size_t, 3>> index_map;
  std::vector<double> values;
};

inline PatchSequence patchify(const FrameStack& stack, const Tubelet& tb) {
  if (tb.t == 0 || tb.h == 0 || tb.w == 0 || stack.frames % tb.t || stack.rows % tb.h || stack.cols % tb.w) {
    throw std::invalid_argument("patchify: stack " + std::to_string(stack.frames) + "x" + std::to_string(stack.rows) +
                                "x" + std::to_string(stack.cols) + " not divisible by tubelet");
  }
  PatchSequence seq;
  seq.tubelet = tb;
  seq.blocks = {stack.frames / tb.t, stack.rows / tb.h, stack.cols / tb.w};
  seq.count = seq.blocks[0] * seq.blocks[1] * seq.blocks[2];
  seq.length = tb.volume();
  seq.values.reserve(stack.size());
  for (std::size_t bt = 0; bt < seq.blocks[0]; ++bt)
    for (std::size_t bh = 0; bh < seq.blocks[1]; ++bh)
      for (std::size_t bw = 0; bw < seq.blocks[2]; ++bw) {
        seq.index_map.push_back({bt, bh, bw});
        for (std::size_t dt = 0; dt < tb.t; ++dt)
          for (std::size_t dh = 0; dh < tb.h; ++dh)
            for (std::size_t dw = 0; dw < tb.w; ++dw)
              seq.values.push_back(stack.at(bt * tb.t + dt, bh * tb.h + dh, bw * tb.w + dw));
      }
  return seq;
}

inline FrameStack unpatchify(const PatchSequence& seq) {
  const Tubelet& tb = seq.tubelet;
  if (seq.values.size() != seq.count * seq.length || seq.count != seq.blocks[0] * seq.blocks[1] * seq.blocks[2] ||
      seq.length != tb.volume() || seq.index_map.size() != seq.count) {
    throw std::invalid_argument("unpatchify: incomplete patch sequence");
  }
  FrameStack stack(seq.blocks[0] * tb.t, seq.blocks[1] * tb.h, seq.blocks[2] * tb.w);
  std::size_t i = 0;
  for (std::size_t n = 0; n < seq.count; ++n) {
    const auto [bt, bh, bw] = seq.index_map[n];
    for (std::size_t dt = 0; dt < tb.t; ++dt)
      for (std::size_t dh = 0; dh < tb.h; ++dh)
        for (std::size_t dw = 0; dw < tb.w; ++dw) stack.at(bt * tb.t + dt, bh * tb.h + dh, bw * tb.w + dw) = seq.values[i++];
  }
  return stack;
}

/// Replaces the values of a patch sequence, keeping its geometry.
inline PatchSequence with_values(PatchSequence seq, std::vector<double> values) {
  seq.values = std::move(values);
  return seq;
}

struct MaskSpec {
  std::vector<std::size_t> visible;
  std::vector<std::size_t> masked;
};

/// Uniformly random patch mask hiding round(ratio·count) tokens, at least one
/// and never all of them.
inline MaskSpec select_patch_mask(std::mt19937_64& rng, std::size_t count, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("select_patch_mask: ratio must lie in (0, 1)");
  if (count < 2) throw std::invalid_argument("select_patch_mask: need at least two patches");
  std::size_t n_masked = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(count)));
  n_masked = std::clamp<std::size_t>(n_masked, 1, count - 1);
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  MaskSpec spec;
  spec.masked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_masked));
  spec.visible.assign(order.begin() + static_cast<std::ptrdiff_t>(n_masked), order.end());
  std::sort(spec.masked.begin(), spec.masked.end());
  std::sort(spec.visible.begin(), spec.visible.end());
  return spec;
}

/// Spatial pixel mask with round((1 - ratio)·rows·cols) observed cells (at
/// least one), chosen uniformly.
inline GridMask random_pixel_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double ratio) {
  const std::size_t total = rows * cols;
  const std::size_t keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround((1.0 - ratio) * static_cast<double>(total))));
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  GridMask mask(rows, cols);
  for (std::size_t i = 0; i < keep; ++i) mask.cells[order[i]] = 1;
  return mask;
}

/// Pixel mask shaped like a sensor deployment: unions of 3×3 footprints at
/// random centers until at least (1 - ratio) of the cells are covered.
inline GridMask structured_pixel_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double ratio) {
  const double target = (1.0 - ratio) * static_cast<double>(rows * cols);
  std::uniform_int_distribution<int> row_dist(0, static_cast<int>(rows) - 1);
  std::uniform_int_distribution<int> col_dist(0, static_cast<int>(cols) - 1);
  GridMask mask(rows, cols);
  while (static_cast<double>(mask.count()) < target) {
    sensing::mark_footprint(mask, {row_dist(rng), col_dist(rng)}, sensing::kDynamicRadius);
  }
  return mask;
}

/// Elementwise product of every frame with a purely spatial mask.
inline FrameStack apply_pixel_mask(const FrameStack& stack, const GridMask& mask) {
  return sensing::apply_mask(stack, mask);
}

struct RecMAEWeights {
  nn::Linear embed;
  std::vector<nn::TransformerBlock> encoder;
  Tensor mask_token;  // [1, D]
  std::vector<nn::TransformerBlock> decoder;
  nn::LayerNorm decoder_norm;
  nn::Linear head;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    embed.visit(nn::join(prefix, "embed"), f);
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit(nn::join(prefix, "encoder." + std::to_string(i)), f);
    f(nn::join(prefix, "mask_token"), mask_token);
    for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit(nn::join(prefix, "decoder." + std::to_string(i)), f);
    decoder_norm.visit(nn::join(prefix, "decoder_norm"), f);
    head.visit(nn::join(prefix, "head"), f);
  }
};

class RecMAE {
 public:
  RecMAE(RecMAEConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg_.embed_dim;
    weights_.embed = nn::Linear::init(cfg_.tubelet.volume(), d, rng, cfg_.init_std);
    for (std::size_t i = 0; i < cfg_.encoder_depth; ++i)
      weights_.encoder.push_back(nn::TransformerBlock::init(d, cfg_.heads, cfg_.ffn_expansion, rng, cfg_.init_std));
    weights_.mask_token = nn::trainable(Tensor::randn({1, d}, rng, 0.02));
    for (std::size_t i = 0; i < cfg_.decoder_depth; ++i)
      weights_.decoder.push_back(nn::TransformerBlock::init(d, cfg_.heads, cfg_.ffn_expansion, rng, cfg_.init_std));
    weights_.decoder_norm = nn::LayerNorm::init(d);
    weights_.head = nn::Linear::init(d, cfg_.tubelet.volume(), rng, cfg_.init_std);
    positions_ = nn::positional_table(cfg_.patch_count(), d, cfg_.pe_base);
  }

  const RecMAEConfig& config() const { return cfg_; }
  RecMAEWeights& weights() { return weights_; }
  const Tensor& positions() const { return positions_; }
  nn::ParamList parameters() { return nn::parameters(weights_); }
  std::vector<Tensor> parameter_tensors() { return nn::parameter_tensors(weights_); }

  /// Linear tubelet projection plus positional encoding: [B, N, L] -> [B, N, D].
  Tensor embed(const Tensor& patches) const { return add(weights_.embed(patches), positions_); }

  /// Encoder blocks over visible tokens only: [B, V, D] -> [B, V, D].
  Tensor encode(const Tensor& visible) const {
    Tensor x = visible;
    for (const auto& block : weights_.encoder) x = block(x);
    return x;
  }

  /// Reinserts mask tokens at masked positions, restores raster order, adds
  /// positional encodings to every token, runs the decoder, and projects each
  /// token back to a tubelet: [B, V, D] -> [B, N, L].
  Tensor decode(const Tensor& encoded, const std::vector<MaskSpec>& masks) const {
    const std::size_t batch = encoded.dim(0);
    const std::size_t n_visible = encoded.dim(1);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t n = cfg_.patch_count();
    if (masks.size() != batch) throw DimensionError("decode: one mask spec per batch item required");
    const std::size_t n_masked = masks[0].masked.size();
    std::vector<std::size_t> order(batch * n, n * batch + 1);
    for (std::size_t b = 0; b < batch; ++b) {
      const MaskSpec& m = masks[b];
      if (m.visible.size() != n_visible || m.masked.size() != n_masked) {
        throw DimensionError("decode: mask spec sizes differ across the batch");
      }
      for (std::size_t j = 0; j < n_visible; ++j) {
        std::size_t& slot = order.at(b * n + m.visible[j]);
        if (slot != n * batch + 1) throw std::invalid_argument("decode: patch index collision");
        slot = b * n_visible + j;
      }
      for (std::size_t j = 0; j < n_masked; ++j) {
        std::size_t& slot = order.at(b * n + m.masked[j]);
        if (slot != n * batch + 1) throw std::invalid_argument("decode: patch index collision");
        slot = batch * n_visible + b * n_masked + j;
      }
    }
    if (std::find(order.begin(), order.end(), n * batch + 1) != order.end()) {
      throw std::invalid_argument("decode: mask spec does not cover every patch");
    }
    Tensor rows = reshape(encoded, {batch * n_visible, d});
    if (n_masked > 0) {
      Tensor fill = gather_rows(weights_.mask_token, std::vector<std::size_t>(batch * n_masked, 0));
      rows = concat_rows(rows, fill);
    }
    Tensor x = add(reshape(gather_rows(rows, order), {batch, n, d}), positions_);
    for (const auto& block : weights_.decoder) x = block(x);
    return weights_.head(weights_.decoder_norm(x));
  }

  /// Full pass from raw (pixel-masked) patches to reconstructed patches.
  Tensor forward(const Tensor& patches, const std::vector<MaskSpec>& masks) const {
    const std::size_t batch = patches.dim(0);
    const std::size_t n = cfg_.patch_count();
    Tensor tokens = reshape(embed(patches), {batch * n, cfg_.embed_dim});
    std::vector<std::size_t> visible_rows;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t v : masks.at(b).visible) visible_rows.push_back(b * n + v);
    const std::size_t n_visible = masks.at(0).visible.size();
    Tensor visible = reshape(gather_rows(tokens, visible_rows), {batch, n_visible, cfg_.embed_dim});
    return decode(encode(visible), masks);
  }

 private:
  RecMAEConfig cfg_;
  RecMAEWeights weights_;
  Tensor positions_;
};

/// Packs stacks into a [B, N, L] patch tensor (no gradient).
inline Tensor patch_batch(const std::vector<const FrameStack*>& stacks, const Tubelet& tb) {
  std::vector<double> values;
  std::size_t count = 0;
  std::size_t length = 0;
  for (const FrameStack* s : stacks) {
    PatchSequence seq = patchify(*s, tb);
    count = seq.count;
    length = seq.length;
    values.insert(values.end(), seq.values.begin(), seq.values.end());
  }
  return Tensor({stacks.size(), count, length}, std::move(values));
}

/// Mean over patches of the squared norm of the patch difference. With
/// masked_only set, only masked patches contribute.
inline Tensor recmae_loss(const Tensor& reconstructed, const Tensor& original,
                          const std::vector<MaskSpec>* masked_only = nullptr) {
  if (reconstructed.shape() != original.shape()) {
    throw DimensionError("recmae_loss: " + shape_str(reconstructed.shape()) + " vs " + shape_str(original.shape()));
  }
  const std::size_t batch = reconstructed.dim(0);
  const std::size_t n = reconstructed.dim(1);
  const std::size_t len = reconstructed.dim(2);
  Tensor sq = square(sub(reconstructed, original));
  if (masked_only == nullptr) return scale(sum(sq), 1.0 / static_cast<double>(batch * n));
  std::vector<double> weights(batch * n * len, 0.0);
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t m : masked_only->at(b).masked) {
      std::fill_n(weights.begin() + static_cast<std::ptrdiff_t>((b * n + m) * len), len, 1.0);
      ++total;
    }
  return scale(sum(mul(sq, Tensor(sq.shape(), std::move(weights)))), 1.0 / static_cast<double>(total));
}

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::size_t repeats = 1;        // fresh mask draws of every stack per epoch
  std::size_t warmup_epochs = 0;  // linear ramp to the base rate
  bool cosine_decay = false;      // half-cosine decay to zero over the run
  std::uint64_t seed = 0;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct TrainResult {
  std::vector<double> loss_history;  // mean batch loss per epoch
};

inline double learning_rate_at(const TrainOptions& opts, std::size_t epoch) {
  double lr = opts.learning_rate;
  if (epoch < opts.warmup_epochs) lr *= static_cast<double>(epoch + 1) / static_cast<double>(opts.warmup_epochs);
  if (opts.cosine_decay && opts.epochs > 0) {
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(opts.epochs)));
  }
  return lr;
}

/// Per epoch: shuffle, and for each batch draw pixel masks, embed, draw patch
/// masks, encode, decode, score against the unmasked truth, and take one Adam
/// step. `dataset` holds standardized stacks.
inline TrainResult train_recmae(RecMAE& model, const std::vector<FrameStack>& dataset, const TrainOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("train_recmae: empty dataset");
  const RecMAEConfig& cfg = model.config();
  for (const FrameStack& s : dataset) {
    if (s.frames != cfg.frames || s.rows != cfg.rows || s.cols != cfg.cols) {
      throw std::invalid_argument("train_recmae: dataset stack shape does not match model config");
    }
  }
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Tensor> params = model.parameter_tensors();
  AdamState adam;
  adam.hyper.learning_rate = opts.learning_rate;
  const std::size_t batch_size = std::max<std::size_t>(1, std::min(opts.batch_size, dataset.size()));

  TrainResult result;
  std::vector<std::size_t> order(dataset.size() * std::max<std::size_t>(1, opts.repeats));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i % dataset.size();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    adam.hyper.learning_rate = learning_rate_at(opts, epoch);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
      std::vector<FrameStack> masked;
      std::vector<const FrameStack*> truth;
      std::vector<MaskSpec> masks;
      for (std::size_t i = start; i < start + batch_size; ++i) {
        const FrameStack& x = dataset[order[i]];
        const GridMask pixel = unit(rng) < cfg.structured_mask_prob
                                   ? structured_pixel_mask(rng, cfg.rows, cfg.cols, cfg.pixel_mask_ratio)
                                   : random_pixel_mask(rng, cfg.rows, cfg.cols, cfg.pixel_mask_ratio);
        masked.push_back(apply_pixel_mask(x, pixel));
        truth.push_back(&x);
      }
      for (std::size_t i = 0; i < batch_size; ++i)
        masks.push_back(select_patch_mask(rng, cfg.patch_count(), cfg.patch_mask_ratio));
      std::vector<const FrameStack*> masked_ptrs;
      for (const FrameStack& m : masked) masked_ptrs.push_back(&m);

      Tape tape;
      double loss_value = 0.0;
      {
        TapeScope scope(tape);
        Tensor recon = model.forward(patch_batch(masked_ptrs, cfg.tubelet), masks);
        Tensor loss = recmae_loss(recon, patch_batch(truth, cfg.tubelet), cfg.masked_only_loss ? &masks : nullptr);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericalError("train_recmae: non-finite loss at epoch " + std::to_string(epoch + 1));
        }
        zero_grads(params);
        backward(tape, loss);
      }
      adam_step(params, adam);
      epoch_loss += loss_value;
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    result.loss_history.push_back(epoch_loss);
    if (opts.on_epoch) opts.on_epoch(epoch, epoch_loss);
  }
  zero_grads(params);
  return result;
}

struct ReconstructOptions {
  std::size_t draws = 1;  // independent patch masks averaged
  bool keep_observed = true;
};

/// Reconstructs a standardized stack from its sensed version (unobserved
/// cells zero). A random patch mask is drawn per draw; observed cells are
/// overwritten with their sensed values in the output.
inline FrameStack reconstruct(const RecMAE& model, const FrameStack& sensed, const CoverageMask& mask,
                              std::mt19937_64& rng, const ReconstructOptions& opts = {}) {
  const RecMAEConfig& cfg = model.config();
  if (sensed.frames != cfg.frames || sensed.rows != cfg.rows || sensed.cols != cfg.cols) {
    throw std::invalid_argument("reconstruct: stack shape does not match the model configuration");
  }
  if (mask.rows != sensed.rows || mask.cols != sensed.cols) throw std::invalid_argument("reconstruct: mask shape");
  TapeScope no_tape(nullptr);
  const std::size_t draws = std::max<std::size_t>(1, opts.draws);
  std::vector<const FrameStack*> inputs(draws, &sensed);
  std::vector<MaskSpec> masks;
  for (std::size_t i = 0; i < draws; ++i) masks.push_back(select_patch_mask(rng, cfg.patch_count(), cfg.patch_mask_ratio));
  Tensor out = model.forward(patch_batch(inputs, cfg.tubelet), masks);

  PatchSequence geometry = patchify(sensed, cfg.tubelet);
  const std::size_t per = geometry.count * geometry.length;
  std::vector<double> averaged(per, 0.0);
  auto ov = out.values();
  for (std::size_t d = 0; d < draws; ++d)
    for (std::size_t i = 0; i < per; ++i) averaged[i] += ov[d * per + i] / static_cast<double>(draws);
  FrameStack recon = unpatchify(with_values(std::move(geometry), std::move(averaged)));
  if (opts.keep_observed) {
    for (std::size_t f = 0; f < recon.frames; ++f) {
      auto dst = recon.frame(f);
      auto src = sensed.frame(f);
      for (std::size_t i = 0; i < dst.size(); ++i)
        if (mask.cells[i]) dst[i] = src[i];
    }
  }
  return recon;
}

}  // namespace rmap::recmae
