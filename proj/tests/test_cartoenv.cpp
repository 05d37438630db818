#include <gtest/gtest.h>

#include <random>

#include "rmap/cartoenv.hpp"

using namespace rmap;
using namespace rmap::cartoenv;

namespace {

std::vector<FrameStack> ramp_episode(std::size_t slots, std::size_t n = 8) {
  std::vector<FrameStack> ep;
  for (std::size_t s = 0; s < slots; ++s) {
    FrameStack st(2, n, n);
    for (std::size_t i = 0; i < st.size(); ++i) st.values[i] = 0.01 * static_cast<double>(i) + static_cast<double>(s);
    ep.push_back(st);
  }
  return ep;
}

}  // namespace

TEST(Actions, DisplacementRoundsAndClips) {
  EXPECT_EQ(displacement(0.2, 2), 0);
  EXPECT_EQ(displacement(0.3, 2), 1);
  EXPECT_EQ(displacement(-0.25, 2), -1);
  EXPECT_EQ(displacement(1.0, 2), 2);
  EXPECT_EQ(displacement(-7.0, 2), -2);
}

TEST(Environment, MovesClipAtBorderAndScoreReward) {
  EnvConfig cfg;
  cfg.agents = 1;
  cfg.static_spacing = 0;
  cfg.starts = {{1, 1}};
  Environment env(cfg, oracle_reconstructor());
  env.reset(ramp_episode(3), 1);
  auto r = env.step({Action{-1.0, 0.5}});
  EXPECT_EQ(env.positions()[0], (Cell{0, 2}));
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_EQ(r.reward, 30.0);
  EXPECT_FALSE(r.done);
  EXPECT_EQ(env.trace().back().covered_cells, 6u);
  EXPECT_THROW(env.step({}), std::invalid_argument);
  env.step({Action{0, 0}});
  r = env.step({Action{0, 0}});
  EXPECT_TRUE(r.done);
  EXPECT_THROW(env.step({Action{0, 0}}), std::logic_error);
}

TEST(Environment, RewardIsOffsetMinusMse) {
  EnvConfig cfg;
  cfg.agents = 2;
  cfg.static_spacing = 4;
  Environment env(cfg, mean_fill_reconstructor());
  const auto episode = ramp_episode(2);
  env.reset(episode, 2);
  const auto r = env.step({Action{0.4, 0.4}, Action{-0.4, -0.4}});
  const CoverageMask mask = env.coverage();
  const double mse = sensing::recon_mse(episode[0], sensing::mean_fill(sensing::apply_mask(episode[0], mask), mask));
  EXPECT_NEAR(r.mse, mse, 1e-15);
  EXPECT_NEAR(r.reward, 30.0 - mse, 1e-15);
  EXPECT_EQ(mask.count(), env.trace().back().covered_cells);
}

TEST(Environment, SingleAxisKeepsDominantComponent) {
  EnvConfig cfg;
  cfg.agents = 1;
  cfg.static_spacing = 0;
  cfg.starts = {{4, 4}};
  cfg.move_mode = MoveMode::SingleAxis;
  Environment env(cfg, oracle_reconstructor());
  env.reset(ramp_episode(2), 3);
  env.step({Action{1.0, -0.6}});
  EXPECT_EQ(env.positions()[0], (Cell{6, 4}));
}

TEST(Environment, ObservationChannelsAndHistory) {
  EnvConfig cfg;
  cfg.agents = 2;
  cfg.static_spacing = 4;
  cfg.history = 4;
  Environment env(cfg, oracle_reconstructor());
  const auto episode = ramp_episode(6);
  auto obs = env.reset(episode, 4);
  ASSERT_EQ(obs.size(), 2u);
  EXPECT_EQ(obs[0].history.size(), 1u);
  for (int s = 0; s < 5; ++s) obs = env.step({Action{0.5, 0}, Action{0, -0.5}}).observations;
  EXPECT_EQ(obs[0].history.size(), 4u);

  const Observation& o = obs[1];
  const auto& f = o.latest();
  ASSERT_EQ(f.size(), kObservationChannels * 64);
  const Cell p = env.positions()[1];
  std::size_t ones = 0;
  for (std::size_t i = 0; i < 64; ++i) ones += f[128 + i] == 1.0f;
  EXPECT_EQ(ones, 1u);
  EXPECT_EQ(o.channel(f, 2, p.row, p.col), 1.0f);
  // Coverage channel: own 3×3 footprint plus static sensors, nothing of the other agent.
  sensing::SensorLayout own{env.static_cells(), {p}};
  const CoverageMask mask = sensing::coverage_mask(own, 8, 8);
  const FrameStack& truth = episode[4];
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_EQ(o.channel(f, 1, r, c), mask.at(r, c) ? 1.0f : 0.0f);
      const double m = 0.5 * (truth.at(0, r, c) + truth.at(1, r, c));
      EXPECT_FLOAT_EQ(o.channel(f, 0, r, c), mask.at(r, c) ? static_cast<float>(m) : 0.0f);
    }
}

TEST(Environment, DefaultStartsAreCornerAdjacent) {
  const auto s = default_starts(5, 16, 16);
  EXPECT_EQ(s[0], (Cell{1, 1}));
  EXPECT_EQ(s[1], (Cell{14, 14}));
  EXPECT_EQ(s[2], (Cell{1, 14}));
  EXPECT_EQ(s[3], (Cell{14, 1}));
  EXPECT_EQ(s[4], (Cell{3, 1}));
}

TEST(Environment, SameSeedSameTrace) {
  EnvConfig cfg;
  auto run = [&] {
    Environment env(cfg, mean_fill_reconstructor());
    env.reset(ramp_episode(4, 16), 5);
    std::mt19937_64 rng(6);
    while (!env.done()) env.step(random_actions(cfg.agents, rng));
    std::vector<double> out;
    for (const auto& t : env.trace()) out.push_back(t.mse);
    return out;
  };
  EXPECT_EQ(run(), run());
}
