#include <gtest/gtest.h>

#include <random>

#include "rmap/optim.hpp"
#include "rmap/recmae.hpp"

using namespace rmap;
using namespace rmap::recmae;

namespace {

FrameStack random_stack(std::size_t f, std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  FrameStack s(f, r, c);
  for (double& v : s.values) v = n(rng);
  return s;
}

RecMAEConfig micro_config() {
  RecMAEConfig cfg;
  cfg.frames = 2;
  cfg.rows = cfg.cols = 4;
  cfg.tubelet = {2, 2, 2};
  cfg.embed_dim = 8;
  cfg.encoder_depth = cfg.decoder_depth = 1;
  cfg.heads = 2;
  cfg.patch_mask_ratio = 0.5;
  cfg.init_std = 0.3;
  return cfg;
}

std::vector<double> row(const Tensor& t, std::size_t r, std::size_t width) {
  auto v = t.values();
  return {v.begin() + static_cast<std::ptrdiff_t>(r * width), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * width)};
}

}  // namespace

TEST(Patchify, RoundTripIsBitExact) {
  const FrameStack s = random_stack(4, 8, 8, 1);
  EXPECT_EQ(unpatchify(patchify(s, {2, 4, 2})), s);
  const FrameStack zero(2, 4, 4);
  EXPECT_EQ(unpatchify(patchify(zero, {1, 2, 2})), zero);
}

TEST(Patchify, CountsAndRasterOrder) {
  const auto full = patchify(FrameStack(16, 64, 64), {2, 8, 8});
  EXPECT_EQ(full.count, 512u);
  EXPECT_EQ(full.length, 128u);

  FrameStack s(2, 4, 4);
  for (std::size_t i = 0; i < s.size(); ++i) s.values[i] = static_cast<double>(i);
  const auto seq = patchify(s, {2, 2, 2});
  ASSERT_EQ(seq.count, 4u);
  EXPECT_EQ(seq.values[0], s.at(0, 0, 0));
  EXPECT_EQ(seq.values[1], s.at(0, 0, 1));
  EXPECT_EQ(seq.values[4], s.at(1, 0, 0));
  EXPECT_EQ(seq.values[8], s.at(0, 0, 2));  // patch 1 is the next column block
  EXPECT_EQ(seq.index_map[2], (std::array<std::size_t, 3>{0, 1, 0}));
  EXPECT_THROW(patchify(FrameStack(3, 4, 4), {2, 2, 2}), std::invalid_argument);
  auto broken = seq;
  broken.values.pop_back();
  EXPECT_THROW(unpatchify(broken), std::invalid_argument);
}

TEST(Masks, PatchMaskSizesAndDeterminism) {
  std::mt19937_64 a(3), b(3);
  const auto m = select_patch_mask(a, 512, 0.75);
  EXPECT_EQ(m.masked.size(), 384u);
  EXPECT_EQ(m.visible.size(), 128u);
  const auto m2 = select_patch_mask(b, 512, 0.75);
  EXPECT_EQ(m.masked, m2.masked);
  EXPECT_EQ(select_patch_mask(a, 10, 0.01).masked.size(), 1u);
}

TEST(Masks, PixelMaskCountsAndStructure) {
  std::mt19937_64 rng(4);
  EXPECT_EQ(random_pixel_mask(rng, 64, 64, 0.9).count(), 410u);
  const auto s = structured_pixel_mask(rng, 16, 16, 0.9);
  EXPECT_GE(s.count(), 26u);
  const FrameStack x = random_stack(3, 16, 16, 5);
  const auto masked = apply_pixel_mask(x, s);
  for (std::size_t f = 1; f < 3; ++f)
    for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(masked.frame(f)[i] == 0.0, masked.frame(0)[i] == 0.0);
}

TEST(Loss, ShiftByOneGivesPatchLength) {
  std::mt19937_64 rng(6);
  Tensor z = Tensor::randn({2, 4, 8}, rng);
  EXPECT_NEAR(recmae_loss(add_scalar(z, 1.0), z).item(), 8.0, 1e-12);
  EXPECT_EQ(recmae_loss(z, z).item(), 0.0);
}

TEST(Loss, MatchesScalarOracle) {
  std::mt19937_64 rng(7);
  Tensor a = Tensor::randn({3, 5, 4}, rng);
  Tensor b = Tensor::randn({3, 5, 4}, rng);
  double total = 0.0;
  for (std::size_t p = 0; p < 15; ++p) {
    double sq = 0.0;
    for (std::size_t k = 0; k < 4; ++k) sq += (a[p * 4 + k] - b[p * 4 + k]) * (a[p * 4 + k] - b[p * 4 + k]);
    total += sq;
  }
  EXPECT_NEAR(recmae_loss(a, b).item(), total / 15.0, 1e-12);
  std::vector<MaskSpec> masks(3, MaskSpec{{0, 1, 2, 3}, {4}});
  double masked = 0.0;
  for (std::size_t bi = 0; bi < 3; ++bi)
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t i = (bi * 5 + 4) * 4 + k;
      masked += (a[i] - b[i]) * (a[i] - b[i]);
    }
  EXPECT_NEAR(recmae_loss(a, b, &masks).item(), masked / 3.0, 1e-12);
}

TEST(Model, ZeroDepthEncoderIsIdentity) {
  RecMAEConfig cfg = micro_config();
  cfg.encoder_depth = 0;
  RecMAE model(cfg, 1);
  std::mt19937_64 rng(8);
  Tensor x = Tensor::randn({1, 2, 8}, rng);
  Tensor y = model.encode(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Model, DecoderPlacesTokensInRasterOrder) {
  // Without blocks every output patch depends on its own token only, so each
  // position can be checked against a direct per-token computation.
  RecMAEConfig cfg = micro_config();
  cfg.encoder_depth = cfg.decoder_depth = 0;
  RecMAE model(cfg, 2);
  const FrameStack s = random_stack(2, 4, 4, 9);
  Tensor patches = patch_batch({&s}, cfg.tubelet);
  const MaskSpec mask{{0, 3}, {1, 2}};
  Tensor out = model.forward(patches, {mask});
  ASSERT_EQ(out.shape(), (Shape{1, 4, 8}));
  auto& w = model.weights();
  Tensor embedded = model.embed(patches);
  for (std::size_t n = 0; n < 4; ++n) {
    const bool visible = n == 0 || n == 3;
    Tensor pe({1, 8}, row(model.positions(), n, 8));
    Tensor token = visible ? add(Tensor({1, 8}, row(embedded, n, 8)), pe) : add(w.mask_token, pe);
    Tensor expect = w.head(w.decoder_norm(token));
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(out[n * 8 + k], expect[k], 1e-12) << n;
  }
}

TEST(Model, DecodeHandlesBoundaryMasks) {
  RecMAE model(micro_config(), 3);
  std::mt19937_64 rng(10);
  Tensor enc = Tensor::randn({1, 4, 8}, rng);
  EXPECT_EQ(model.decode(enc, {MaskSpec{{0, 1, 2, 3}, {}}}).shape(), (Shape{1, 4, 8}));
  Tensor one = Tensor::randn({1, 1, 8}, rng);
  EXPECT_EQ(model.decode(one, {MaskSpec{{2}, {0, 1, 3}}}).shape(), (Shape{1, 4, 8}));
  Tensor two = Tensor::randn({1, 2, 8}, rng);
  EXPECT_THROW(model.decode(two, {MaskSpec{{1, 1}, {0, 3}}}), std::invalid_argument);
}

TEST(Model, EncoderIsPermutationEquivariant) {
  RecMAEConfig cfg = micro_config();
  cfg.frames = 2;
  cfg.rows = 4;
  cfg.cols = 8;
  cfg.encoder_depth = 2;
  RecMAE model(cfg, 4);
  std::mt19937_64 rng(11);
  Tensor x = Tensor::randn({1, 8, 8}, rng);
  const std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  Tensor px = reshape(gather_rows(reshape(x, {8, 8}), perm), {1, 8, 8});
  Tensor y = model.encode(x);
  Tensor py = model.encode(px);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(py[i * 8 + k], y[perm[i] * 8 + k], 1e-12);
}

TEST(Model, TrainStepGradientMatchesFiniteDifferences) {
  RecMAE model(micro_config(), 5);
  const FrameStack s = random_stack(2, 4, 4, 12);
  Tensor patches = patch_batch({&s}, model.config().tubelet);
  const std::vector<MaskSpec> masks{{{1, 2}, {0, 3}}};
  std::mt19937_64 rng(13);
  auto report = grad_check(
      [&](const std::vector<Tensor>& x) {
        RecMAE m = model;
        m.weights().embed.weight = x[0];
        m.weights().encoder[0].attention.key.weight = x[1];
        m.weights().decoder[0].expand.weight = x[2];
        m.weights().mask_token = x[3];
        return recmae_loss(m.forward(patches, masks), patches);
      },
      {{8, 8}, {8, 8}, {8, 32}, {1, 8}}, 1e-4, rng);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Training, ZeroLearningRateAndDeterminism) {
  const std::vector<FrameStack> data{random_stack(2, 4, 4, 14), random_stack(2, 4, 4, 15)};
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 2;
  opts.learning_rate = 0.0;
  opts.seed = 7;
  RecMAE frozen(micro_config(), 6);
  const auto before = frozen.parameter_tensors()[0];
  const std::vector<double> snapshot(before.values().begin(), before.values().end());
  train_recmae(frozen, data, opts);
  const auto after = frozen.parameter_tensors()[0];
  EXPECT_EQ(std::vector<double>(after.values().begin(), after.values().end()), snapshot);

  opts.learning_rate = 1e-2;
  RecMAE a(micro_config(), 6), b(micro_config(), 6);
  EXPECT_EQ(train_recmae(a, data, opts).loss_history, train_recmae(b, data, opts).loss_history);
}

TEST(Training, LearningRateSchedule) {
  TrainOptions opts;
  opts.epochs = 10;
  opts.learning_rate = 1.0;
  opts.warmup_epochs = 4;
  EXPECT_DOUBLE_EQ(learning_rate_at(opts, 0), 0.25);
  EXPECT_DOUBLE_EQ(learning_rate_at(opts, 5), 1.0);
  opts.warmup_epochs = 0;
  opts.cosine_decay = true;
  EXPECT_DOUBLE_EQ(learning_rate_at(opts, 0), 1.0);
  EXPECT_NEAR(learning_rate_at(opts, 5), 0.5, 1e-15);
}

TEST(Reconstruct, KeepsObservedCellsAndShape) {
  RecMAE model(micro_config(), 7);
  const FrameStack truth = random_stack(2, 4, 4, 16);
  CoverageMask mask(4, 4);
  mask.at(0, 1) = mask.at(2, 3) = 1;
  const FrameStack sensed = sensing::apply_mask(truth, mask);
  std::mt19937_64 rng(17);
  const FrameStack out = reconstruct(model, sensed, mask, rng);
  ASSERT_TRUE(out.same_shape(truth));
  for (std::size_t f = 0; f < 2; ++f) {
    EXPECT_EQ(out.at(f, 0, 1), truth.at(f, 0, 1));
    EXPECT_EQ(out.at(f, 2, 3), truth.at(f, 2, 3));
  }
  EXPECT_THROW(reconstruct(model, FrameStack(2, 4, 8), mask, rng), std::invalid_argument);
}
