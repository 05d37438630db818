#pragma once

// Urban air-to-ground channel simulator producing temporal radio power maps
// for pedestrians walking on a central crossroad.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "rmap/grid.hpp"

namespace rmap::propagation {

inline constexpr double kSpeedOfLight = 2.998e8;

struct ScenarioConfig {
  double area_x_m = 256.0;
  double area_y_m = 256.0;
  double cell_x_m = 4.0;
  double cell_y_m = 4.0;
  std::size_t rows = 64;
  std::size_t cols = 64;
  double sensor_height_m = 50.0;
  double carrier_hz = 1.8e9;
  double tx_power_dbm = 20.0;
  std::size_t ue_min = 3;
  std::size_t ue_max = 5;
  std::size_t frames_per_slot = 16;
  std::size_t slots = 10;
  double a_los = 9.61;
  double b_los = 0.16;
  double n_los = 2.2;
  double n_nlos = 3.8;
  double shadow_std_db = 6.0;
  double decorrelation_m = 50.0;
  double reference_m = 1.0;
  double frame_interval_s = 1.0;
  double speed_min = 1.0;
  double speed_max = 1.5;
  double road_half_width_m = 4.0;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw std::invalid_argument(std::string("scenario: ") + name + " must be positive");
    };
    positive(area_x_m, "area_x_m");
    positive(area_y_m, "area_y_m");
    positive(cell_x_m, "cell_x_m");
    positive(cell_y_m, "cell_y_m");
    positive(sensor_height_m, "sensor_height_m");
    positive(carrier_hz, "carrier_hz");
    positive(shadow_std_db, "shadow_std_db");
    positive(decorrelation_m, "decorrelation_m");
    positive(reference_m, "reference_m");
    positive(frame_interval_s, "frame_interval_s");
    positive(speed_min, "speed_min");
    positive(road_half_width_m, "road_half_width_m");
    if (rows == 0 || cols == 0 || frames_per_slot == 0 || slots == 0) {
      throw std::invalid_argument("scenario: grid extents, frames and slots must be positive");
    }
    if (std::abs(static_cast<double>(rows) * cell_x_m - area_x_m) > 1e-9 ||
        std::abs(static_cast<double>(cols) * cell_y_m - area_y_m) > 1e-9) {
      throw std::invalid_argument("scenario: rows*cell_x and cols*cell_y must equal the area sides");
    }
    if (ue_min == 0 || ue_min > ue_max) throw std::invalid_argument("scenario: need 0 < ue_min <= ue_max");
    if (speed_min > speed_max) throw std::invalid_argument("scenario: speed_min > speed_max");
    if (a_los < 0.0 || b_los < 0.0) throw std::invalid_argument("scenario: LOS parameters must be nonnegative");
  }

  double cell_center_x(std::size_t r) const { return (static_cast<double>(r) + 0.5) * cell_x_m; }
  double cell_center_y(std::size_t c) const { return (static_cast<double>(c) + 0.5) * cell_y_m; }
};

enum class Road : std::uint8_t { AlongX, AlongY };
enum class Link : std::uint8_t { LineOfSight, NonLineOfSight };

struct UEState {
  double x = 0.0;
  double y = 0.0;
  double heading_x = 1.0;
  double heading_y = 0.0;
  double speed = 1.0;
  Road road = Road::AlongX;
};

/// Correlated shadowing in dB, one value per grid cell (row-major).
struct ShadowField {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Free-space loss at the reference distance, 20·log10(4π·d0/λ) with λ = c/f.
inline double reference_path_loss(double carrier_hz, double reference_m) {
  if (!(carrier_hz > 0.0) || !(reference_m > 0.0)) {
    throw std::invalid_argument("reference_path_loss: frequency and distance must be positive");
  }
  const double wavelength = kSpeedOfLight / carrier_hz;
  return 20.0 * std::log10(4.0 * std::numbers::pi * reference_m / wavelength);
}

/// Elevation angle in degrees seen from a point at horizontal distance d2d.
inline double elevation_deg(double d2d, double height) {
  if (d2d <= 0.0) return 90.0;
  return std::atan(height / d2d) * 180.0 / std::numbers::pi;
}

inline double los_probability_from_angle(double theta_deg, double a_los, double b_los) {
  return 1.0 / (1.0 + a_los * std::exp(-b_los * (theta_deg - a_los)));
}

inline double los_probability(double d2d, double height, double a_los, double b_los) {
  return los_probability_from_angle(elevation_deg(d2d, height), a_los, b_los);
}

/// Log-distance loss for one link state. Distances below the reference are
/// clamped to it.
inline double path_loss(double d3d, Link link, double shadow_db, const ScenarioConfig& cfg) {
  double d = d3d;
  if (d < cfg.reference_m) {
    static thread_local bool warned = false;
    if (!warned) {
      std::cerr << "warning: link distance " << d3d << " m below reference distance, clamping\n";
      warned = true;
    }
    d = cfg.reference_m;
  }
  const double pl0 = reference_path_loss(cfg.carrier_hz, cfg.reference_m);
  const double decades = std::log10(d / cfg.reference_m);
  if (link == Link::LineOfSight) return pl0 + 10.0 * cfg.n_los * decades;
  return pl0 + 10.0 * cfg.n_nlos * decades + shadow_db;
}

/// Draws zero-mean Gaussian fields with covariance σ²·exp(-d/d_corr) between
/// grid-cell centers. The covariance factor is computed once per geometry.
class ShadowSampler {
 public:
  ShadowSampler(std::size_t rows, std::size_t cols, double cell_x, double cell_y, double sigma_db,
                double decorrelation_m)
      : rows_(rows), cols_(cols) {
    if (!(sigma_db > 0.0) || !(decorrelation_m > 0.0)) {
      throw std::invalid_argument("shadow field: sigma and decorrelation distance must be positive");
    }
    const Eigen::Index n = static_cast<Eigen::Index>(rows * cols);
    Eigen::MatrixXd cov(n, n);
    const double var = sigma_db * sigma_db;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double xi = static_cast<double>(i / static_cast<Eigen::Index>(cols)) * cell_x;
      const double yi = static_cast<double>(i % static_cast<Eigen::Index>(cols)) * cell_y;
      for (Eigen::Index j = 0; j <= i; ++j) {
        const double xj = static_cast<double>(j / static_cast<Eigen::Index>(cols)) * cell_x;
        const double yj = static_cast<double>(j % static_cast<Eigen::Index>(cols)) * cell_y;
        const double d = std::hypot(xi - xj, yi - yj);
        cov(i, j) = cov(j, i) = var * std::exp(-d / decorrelation_m);
      }
      cov(i, i) += 1e-9 * var;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw std::runtime_error("shadow field: covariance is not positive definite");
    lower_ = llt.matrixL();
  }

  explicit ShadowSampler(const ScenarioConfig& cfg)
      : ShadowSampler(cfg.rows, cfg.cols, cfg.cell_x_m, cfg.cell_y_m, cfg.shadow_std_db, cfg.decorrelation_m) {}

  ShadowField sample(std::mt19937_64& rng) const {
    std::normal_distribution<double> normal;
    Eigen::VectorXd z(lower_.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
    Eigen::VectorXd field = lower_.triangularView<Eigen::Lower>() * z;
    return {rows_, cols_, std::vector<double>(field.data(), field.data() + field.size())};
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  Eigen::MatrixXd lower_;
};

inline ShadowField sample_shadow_field(std::mt19937_64& rng, const ScenarioConfig& cfg) {
  return ShadowSampler(cfg).sample(rng);
}

/// Received power of one UE at one grid cell, in dBm, using the LOS/NLOS
/// probability-weighted path loss.
inline double ue_power_dbm(const UEState& ue, std::size_t r, std::size_t c, double shadow_db,
                           const ScenarioConfig& cfg) {
  const double d2d = std::hypot(cfg.cell_center_x(r) - ue.x, cfg.cell_center_y(c) - ue.y);
  const double d3d = std::sqrt(d2d * d2d + cfg.sensor_height_m * cfg.sensor_height_m);
  const double p_los = los_probability(d2d, cfg.sensor_height_m, cfg.a_los, cfg.b_los);
  const double p_nlos = 1.0 - p_los;
  const double loss = p_los * path_loss(d3d, Link::LineOfSight, 0.0, cfg) +
                      p_nlos * path_loss(d3d, Link::NonLineOfSight, shadow_db, cfg);
  return cfg.tx_power_dbm - loss;
}

/// One rows × cols frame: per-UE powers summed in milliwatts, back to dBm.
inline std::vector<double> received_power_map(const std::vector<UEState>& ues, const std::vector<ShadowField>& shadows,
                                              const ScenarioConfig& cfg) {
  std::vector<double> frame(cfg.rows * cfg.cols, -std::numeric_limits<double>::infinity());
  if (ues.empty()) return frame;
  if (shadows.size() != ues.size()) throw std::invalid_argument("received_power_map: need one shadow field per UE");
  for (std::size_t r = 0; r < cfg.rows; ++r) {
    for (std::size_t c = 0; c < cfg.cols; ++c) {
      double milliwatts = 0.0;
      for (std::size_t i = 0; i < ues.size(); ++i) {
        milliwatts += std::pow(10.0, ue_power_dbm(ues[i], r, c, shadows[i].at(r, c), cfg) / 10.0);
      }
      frame[r * cfg.cols + c] = 10.0 * std::log10(milliwatts);
    }
  }
  return frame;
}

/// Advances every UE along its road; a UE crossing the area boundary is
/// reflected back inside and its heading reversed.
inline std::vector<UEState> step_ues(std::vector<UEState> ues, double dt, const ScenarioConfig& cfg) {
  if (!(dt > 0.0)) throw std::invalid_argument("step_ues: dt must be positive");
  auto reflect = [](double& pos, double& heading, double limit) {
    if (pos > limit) {
      pos = 2.0 * limit - pos;
      heading = -heading;
    } else if (pos < 0.0) {
      pos = -pos;
      heading = -heading;
    }
    pos = std::clamp(pos, 0.0, limit);
  };
  for (UEState& ue : ues) {
    ue.x += ue.heading_x * ue.speed * dt;
    ue.y += ue.heading_y * ue.speed * dt;
    reflect(ue.x, ue.heading_x, cfg.area_x_m);
    reflect(ue.y, ue.heading_y, cfg.area_y_m);
  }
  return ues;
}

/// Places a UE uniformly on one of the two perpendicular road corridors
/// through the area center, walking in a random direction along the road.
inline UEState spawn_ue(std::mt19937_64& rng, const ScenarioConfig& cfg) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> lane(-cfg.road_half_width_m, cfg.road_half_width_m);
  std::uniform_real_distribution<double> speed(cfg.speed_min, cfg.speed_max);
  UEState ue;
  ue.road = unit(rng) < 0.5 ? Road::AlongX : Road::AlongY;
  const double direction = unit(rng) < 0.5 ? -1.0 : 1.0;
  const double along = unit(rng);
  const double offset = lane(rng);
  ue.speed = speed(rng);
  if (ue.road == Road::AlongX) {
    ue.x = along * cfg.area_x_m;
    ue.y = 0.5 * cfg.area_y_m + offset;
    ue.heading_x = direction;
    ue.heading_y = 0.0;
  } else {
    ue.x = 0.5 * cfg.area_x_m + offset;
    ue.y = along * cfg.area_y_m;
    ue.heading_x = 0.0;
    ue.heading_y = direction;
  }
  return ue;
}

struct Episode {
  std::uint64_t seed = 0;
  std::vector<UEState> initial_ues;
  std::vector<FrameStack> slots;  // each frames_per_slot × rows × cols, dBm
};

/// Simulates one episode. UEs and their shadow fields are drawn once; UEs are
/// stepped after every frame. Deterministic in (cfg, seed).
inline Episode generate_episode(const ScenarioConfig& cfg, std::uint64_t seed, const ShadowSampler& sampler) {
  cfg.validate();
  if (sampler.rows() != cfg.rows || sampler.cols() != cfg.cols) {
    throw std::invalid_argument("generate_episode: shadow sampler geometry does not match the scenario");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> count(cfg.ue_min, cfg.ue_max);
  const std::size_t n = count(rng);
  std::vector<UEState> ues;
  for (std::size_t i = 0; i < n; ++i) ues.push_back(spawn_ue(rng, cfg));
  std::vector<ShadowField> shadows;
  for (std::size_t i = 0; i < n; ++i) shadows.push_back(sampler.sample(rng));

  Episode ep;
  ep.seed = seed;
  ep.initial_ues = ues;
  for (std::size_t s = 0; s < cfg.slots; ++s) {
    FrameStack stack(cfg.frames_per_slot, cfg.rows, cfg.cols);
    for (std::size_t f = 0; f < cfg.frames_per_slot; ++f) {
      auto frame = received_power_map(ues, shadows, cfg);
      std::copy(frame.begin(), frame.end(), stack.frame(f).begin());
      ues = step_ues(std::move(ues), cfg.frame_interval_s, cfg);
    }
    ep.slots.push_back(std::move(stack));
  }
  return ep;
}

inline Episode generate_episode(const ScenarioConfig& cfg, std::uint64_t seed) {
  return generate_episode(cfg, seed, ShadowSampler(cfg));
}

}  // namespace rmap::propagation
