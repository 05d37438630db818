#pragma once

// Multi-UAV sensing environment. Each step moves the dynamic sensors, senses
// the current slot, scores a pluggable reconstructor against the truth and
// hands every agent its own partial observation.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmap/grid.hpp"
#include "rmap/kriging.hpp"
#include "rmap/recmae.hpp"
#include "rmap/sensing.hpp"

namespace rmap::cartoenv {

enum class MoveMode : std::uint8_t { Chebyshev, SingleAxis };

struct EnvConfig {
  std::size_t agents = 2;
  std::vector<Cell> starts;  // empty: corner-adjacent defaults
  std::size_t static_spacing = 8;
  int max_move = 2;
  MoveMode move_mode = MoveMode::Chebyshev;
  std::size_t history = 4;
  double reward_offset = 30.0;
};

/// Corner-adjacent start cells, assigned corner by corner.
inline std::vector<Cell> default_starts(std::size_t agents, std::size_t rows, std::size_t cols) {
  const int r1 = static_cast<int>(rows) - 2;
  const int c1 = static_cast<int>(cols) - 2;
  const std::array<Cell, 4> corners{Cell{1, 1}, Cell{r1, c1}, Cell{1, c1}, Cell{r1, 1}};
  std::vector<Cell> out;
  for (std::size_t i = 0; i < agents; ++i) {
    Cell c = corners[i % 4];
    const int shift = static_cast<int>(i / 4) * 2;
    c.row += c.row == 1 ? shift : -shift;
    out.push_back(c);
  }
  return out;
}

/// What a reconstructor sees for one slot. `truth` is exposed for oracle
/// stubs and diagnostics only.
struct SlotInput {
  const FrameStack& sensed;
  const CoverageMask& mask;
  const FrameStack& truth;
};

using Reconstructor = std::function<FrameStack(const SlotInput&, std::mt19937_64&)>;

inline Reconstructor oracle_reconstructor() {
  return [](const SlotInput& in, std::mt19937_64&) { return in.truth; };
}

inline Reconstructor mean_fill_reconstructor() {
  return [](const SlotInput& in, std::mt19937_64&) { return sensing::mean_fill(in.sensed, in.mask); };
}

inline Reconstructor kriging_reconstructor(kriging::KrigeOptions opts) {
  return [opts](const SlotInput& in, std::mt19937_64&) { return kriging::krige_stack(in.sensed, in.mask, opts); };
}

/// The model must outlive the returned callable.
inline Reconstructor recmae_reconstructor(const recmae::RecMAE& model, recmae::ReconstructOptions opts = {}) {
  return [&model, opts](const SlotInput& in, std::mt19937_64& rng) {
    return recmae::reconstruct(model, in.sensed, in.mask, rng, opts);
  };
}

inline constexpr std::size_t kObservationChannels = 3;

/// One agent's history of channel stacks (sensed frame-mean, own coverage,
/// one-hot position), oldest first, at most `history` entries.
struct Observation {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::vector<float>> history;

  const std::vector<float>& latest() const { return history.back(); }
  float channel(const std::vector<float>& frame, std::size_t ch, std::size_t r, std::size_t c) const {
    return frame[(ch * rows + r) * cols + c];
  }
};

using Action = std::array<double, 2>;

struct StepResult {
  std::vector<Observation> observations;
  double reward = 0.0;
  double mse = 0.0;
  bool done = false;
};

struct SlotTrace {
  std::size_t slot = 0;
  std::vector<Cell> positions;
  std::size_t covered_cells = 0;
  double mse = 0.0;
  double reward = 0.0;
};

/// Integer displacement for one action component: scale, round half away
/// from zero, clip.
inline int displacement(double action, int max_move) {
  const double scaled = std::round(action * static_cast<double>(max_move));
  return static_cast<int>(std::clamp(scaled, -static_cast<double>(max_move), static_cast<double>(max_move)));
}

class Environment {
 public:
  Environment(EnvConfig cfg, Reconstructor reconstructor)
      : cfg_(std::move(cfg)), reconstructor_(std::move(reconstructor)) {
    if (cfg_.agents == 0) throw std::invalid_argument("environment: need at least one agent");
    if (cfg_.history == 0) throw std::invalid_argument("environment: history length must be positive");
  }

  /// Starts an episode of standardized truth stacks (one per slot).
  std::vector<Observation> reset(std::vector<FrameStack> episode, std::uint64_t seed) {
    if (episode.empty()) throw std::invalid_argument("environment: empty episode");
    for (const FrameStack& s : episode) require_same_shape(s, episode[0], "environment reset");
    truth_ = std::move(episode);
    rows_ = truth_[0].rows;
    cols_ = truth_[0].cols;
    rng_.seed(seed);
    slot_ = 0;
    trace_.clear();
    static_cells_ = sensing::static_layout(cfg_.static_spacing, rows_, cols_);
    positions_ = cfg_.starts.empty() ? default_starts(cfg_.agents, rows_, cols_) : cfg_.starts;
    if (positions_.size() != cfg_.agents) throw std::invalid_argument("environment: start cell count != agents");
    GridMask bounds(rows_, cols_);
    for (const Cell& c : positions_)
      if (!bounds.inside(c.row, c.col)) throw std::invalid_argument("environment: start cell outside grid");
    histories_.assign(cfg_.agents, {});
    push_observations(0);
    return observations();
  }

  StepResult step(const std::vector<Action>& actions) {
    if (done()) throw std::logic_error("environment: step after episode end");
    if (actions.size() != cfg_.agents) {
      throw std::invalid_argument("environment: expected " + std::to_string(cfg_.agents) + " actions, got " +
                                  std::to_string(actions.size()));
    }
    for (std::size_t i = 0; i < cfg_.agents; ++i) {
      int dr = displacement(actions[i][0], cfg_.max_move);
      int dc = displacement(actions[i][1], cfg_.max_move);
      if (cfg_.move_mode == MoveMode::SingleAxis) {
        if (std::abs(dr) >= std::abs(dc)) dc = 0; else dr = 0;
      }
      positions_[i].row = std::clamp(positions_[i].row + dr, 0, static_cast<int>(rows_) - 1);
      positions_[i].col = std::clamp(positions_[i].col + dc, 0, static_cast<int>(cols_) - 1);
    }
    const CoverageMask mask = coverage();
    const FrameStack& truth = truth_[slot_];
    const FrameStack sensed = sensing::apply_mask(truth, mask);
    const FrameStack recon = reconstructor_(SlotInput{sensed, mask, truth}, rng_);
    StepResult result;
    result.mse = sensing::recon_mse(truth, recon);
    result.reward = cfg_.reward_offset - result.mse;
    trace_.push_back({slot_, positions_, mask.count(), result.mse, result.reward});
    push_observations(slot_);
    ++slot_;
    result.done = done();
    result.observations = observations();
    return result;
  }

  Observation observe(std::size_t agent) const {
    Observation obs;
    obs.rows = rows_;
    obs.cols = cols_;
    obs.history = histories_.at(agent);
    return obs;
  }

  std::vector<Observation> observations() const {
    std::vector<Observation> out;
    for (std::size_t i = 0; i < cfg_.agents; ++i) out.push_back(observe(i));
    return out;
  }

  /// Union of static and all dynamic footprints at the current positions.
  CoverageMask coverage() const {
    return sensing::coverage_mask({static_cells_, positions_}, rows_, cols_);
  }

  bool done() const { return slot_ >= truth_.size(); }
  std::size_t slot() const { return slot_; }
  std::size_t slots() const { return truth_.size(); }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const EnvConfig& config() const { return cfg_; }
  const std::vector<Cell>& positions() const { return positions_; }
  const std::vector<Cell>& static_cells() const { return static_cells_; }
  const std::vector<SlotTrace>& trace() const { return trace_; }

 private:
  // Agent i sees its own 3×3 footprint plus the static sensors.
  std::vector<float> build_frame(std::size_t agent, std::size_t slot) const {
    const CoverageMask own = sensing::coverage_mask({static_cells_, {positions_[agent]}}, rows_, cols_);
    const FrameStack& truth = truth_[slot];
    const std::size_t plane = rows_ * cols_;
    std::vector<float> frame(kObservationChannels * plane, 0.0f);
    for (std::size_t i = 0; i < plane; ++i) {
      if (!own.cells[i]) continue;
      double total = 0.0;
      for (std::size_t f = 0; f < truth.frames; ++f) total += truth.values[f * plane + i];
      frame[i] = static_cast<float>(total / static_cast<double>(truth.frames));
      frame[plane + i] = 1.0f;
    }
    const Cell p = positions_[agent];
    frame[2 * plane + static_cast<std::size_t>(p.row) * cols_ + static_cast<std::size_t>(p.col)] = 1.0f;
    return frame;
  }

  void push_observations(std::size_t slot) {
    for (std::size_t i = 0; i < cfg_.agents; ++i) {
      auto& h = histories_[i];
      h.push_back(build_frame(i, slot));
      if (h.size() > cfg_.history) h.erase(h.begin());
    }
  }

  EnvConfig cfg_;
  Reconstructor reconstructor_;
  std::vector<FrameStack> truth_;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t slot_ = 0;
  std::mt19937_64 rng_;
  std::vector<Cell> static_cells_;
  std::vector<Cell> positions_;
  std::vector<std::vector<std::vector<float>>> histories_;
  std::vector<SlotTrace> trace_;
};

inline std::vector<Action> random_actions(std::size_t agents, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<Action> out(agents);
  for (Action& a : out) a = {unit(rng), unit(rng)};
  return out;
}

/// slot,agent,row,col,covered_cells,mse,reward; one row per agent per slot.
inline void write_trace_csv(const std::string& path, const std::vector<SlotTrace>& trace) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write trace file " + path);
  os << "slot,agent,row,col,covered_cells,mse,reward\n";
  os.precision(17);
  for (const SlotTrace& s : trace)
    for (std::size_t a = 0; a < s.positions.size(); ++a)
      os << s.slot << ',' << a << ',' << s.positions[a].row << ',' << s.positions[a].col << ',' << s.covered_cells
         << ',' << s.mse << ',' << s.reward << '\n';
}

}  // namespace rmap::cartoenv
