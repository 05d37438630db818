#pragma once

// End-to-end building blocks shared by the command-line tool and the
// acceptance runs: dataset generation, reconstruction evaluation, planner
// episode sources.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "rmap/cartoenv.hpp"
#include "rmap/config.hpp"
#include "rmap/madp.hpp"
#include "rmap/propagation.hpp"
#include "rmap/recmae.hpp"
#include "rmap/sensing.hpp"

namespace rmap::pipeline {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent per-item seed derived from a run seed, a stream tag and an index.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ splitmix64(stream)) + index);
}

enum Stream : std::uint64_t { kDataStream = 1, kEvalStream = 2, kPlannerStream = 3, kCalibrationStream = 4 };

/// Worker count: RMAP_THREADS if set, else the hardware concurrency.
inline std::size_t thread_count() {
  if (const char* env = std::getenv("RMAP_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first
/// exception is rethrown after all workers join.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Episodes in dBm, episode i seeded by derive_seed(seed, data, i).
inline std::vector<propagation::Episode> generate_dataset(const propagation::ScenarioConfig& scenario,
                                                          std::size_t episodes, std::uint64_t seed,
                                                          std::size_t threads = 1,
                                                          std::uint64_t stream = kDataStream) {
  const propagation::ShadowSampler sampler(scenario);
  std::vector<propagation::Episode> out(episodes);
  parallel_for(episodes, threads, [&](std::size_t i) {
    out[i] = propagation::generate_episode(scenario, derive_seed(seed, stream, i), sampler);
  });
  return out;
}

/// Standardization statistics over float32-rounded values, matching what a
/// reader of the written dataset recomputes.
inline sensing::Standardizer fit_float_standardizer(const std::vector<propagation::Episode>& episodes) {
  std::vector<FrameStack> rounded;
  for (const auto& ep : episodes)
    for (const FrameStack& s : ep.slots) {
      FrameStack r = s;
      for (double& v : r.values) v = static_cast<double>(static_cast<float>(v));
      rounded.push_back(std::move(r));
    }
  std::vector<const FrameStack*> ptrs;
  for (const FrameStack& s : rounded) ptrs.push_back(&s);
  return sensing::Standardizer::fit(ptrs);
}

/// Fixed-seed calibration statistics for runs that have no dataset.
inline sensing::Standardizer calibration_standardizer(const propagation::ScenarioConfig& scenario) {
  return fit_float_standardizer(generate_dataset(scenario, 8, config::kDefaultSeed, 1, kCalibrationStream));
}

inline std::vector<FrameStack> standardize_all(const std::vector<FrameStack>& stacks, const sensing::Standardizer& st) {
  std::vector<FrameStack> out;
  for (const FrameStack& s : stacks) out.push_back(st.standardize(s));
  return out;
}

struct ReconstructionResult {
  double mse = 0.0;          // mean over slots
  double realized_rho = 0.0;  // mean covered fraction over slots
  double wall_ms = 0.0;
};

/// Per episode and slot: random deployment at coverage rho, sense, rebuild,
/// score. Episode i draws from derive_seed(seed, eval, i), so results do not
/// depend on the worker count.
inline std::vector<ReconstructionResult> evaluate_reconstruction(
    const std::vector<std::vector<FrameStack>>& standardized_episodes, const cartoenv::Reconstructor& reconstructor,
    double rho, std::uint64_t seed, std::size_t threads = 1) {
  std::vector<ReconstructionResult> out(standardized_episodes.size());
  parallel_for(standardized_episodes.size(), threads, [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(seed, kEvalStream, i));
    const auto start = std::chrono::steady_clock::now();
    ReconstructionResult r;
    for (const FrameStack& truth : standardized_episodes[i]) {
      const auto layout = sensing::random_layout(rng, rho, truth.rows, truth.cols);
      const CoverageMask mask = sensing::coverage_mask(layout, truth.rows, truth.cols);
      const FrameStack sensed = sensing::apply_mask(truth, mask);
      const FrameStack recon = reconstructor(cartoenv::SlotInput{sensed, mask, truth}, rng);
      r.mse += sensing::recon_mse(truth, recon);
      r.realized_rho += mask.fraction();
    }
    const double n = static_cast<double>(standardized_episodes[i].size());
    r.mse /= n;
    r.realized_rho /= n;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out[i] = r;
  });
  return out;
}

/// Planner episodes generated on demand and standardized.
inline madp::EpisodeFactory planner_episodes(const propagation::ScenarioConfig& scenario,
                                             const sensing::Standardizer& st, std::uint64_t seed) {
  auto sampler = std::make_shared<propagation::ShadowSampler>(scenario);
  return [scenario, st, seed, sampler](std::size_t i) {
    return standardize_all(propagation::generate_episode(scenario, derive_seed(seed, kPlannerStream, i), *sampler).slots,
                           st);
  };
}

inline cartoenv::Reconstructor surrogate(const std::string& name, const config::RunConfig& cfg,
                                         const recmae::RecMAE* model = nullptr) {
  if (name == "meanfill") return cartoenv::mean_fill_reconstructor();
  if (name == "kriging") return cartoenv::kriging_reconstructor(cfg.krige_options());
  if (name == "oracle") return cartoenv::oracle_reconstructor();
  if (name == "recmae") {
    if (model == nullptr) throw std::invalid_argument("the recmae surrogate needs a trained checkpoint");
    return cartoenv::recmae_reconstructor(*model, {cfg.recmae_training.inference_draws, true});
  }
  throw std::invalid_argument("unknown reconstructor '" + name + "'");
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace rmap::pipeline
