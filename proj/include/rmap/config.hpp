#pragma once

// Run configuration with two built-in profiles and strict JSON overlay.

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "rmap/cartoenv.hpp"
#include "rmap/kriging.hpp"
#include "rmap/madp.hpp"
#include "rmap/propagation.hpp"
#include "rmap/recmae.hpp"

namespace rmap::config {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::uint64_t kDefaultSeed = 20240917;

struct RecmaeTraining {
  std::size_t epochs = 300;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  std::size_t repeats = 1;
  std::size_t warmup_epochs = 0;
  bool cosine_decay = false;
  std::size_t max_stacks = 0;  // 0: every stack in the dataset
  std::size_t inference_draws = 1;
};

struct MadpTraining {
  std::size_t episodes = 200;
  std::string surrogate = "meanfill";  // meanfill | kriging | oracle | recmae
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = kDefaultSeed;
  propagation::ScenarioConfig scenario;
  recmae::RecMAEConfig recmae;
  RecmaeTraining recmae_training;
  cartoenv::EnvConfig env;
  madp::MadpHyper madp;
  MadpTraining madp_training;

  /// Derived fields that must track the scenario.
  void sync() {
    recmae.frames = scenario.frames_per_slot;
    recmae.rows = scenario.rows;
    recmae.cols = scenario.cols;
    madp.encoder.rows = scenario.rows;
    madp.encoder.cols = scenario.cols;
    madp.encoder.history = env.history;
  }

  void validate() const {
    scenario.validate();
    recmae.validate();
    if (env.agents == 0) throw ConfigError("env.agents must be positive");
    if (madp.encoder.rows % madp.encoder.feature_patch || madp.encoder.cols % madp.encoder.feature_patch) {
      throw ConfigError("madp.feature_patch must divide the grid");
    }
    if (madp.encoder.embed % 2) throw ConfigError("madp.embed must be even");
    static const std::set<std::string> surrogates{"meanfill", "kriging", "oracle", "recmae"};
    if (!surrogates.count(madp_training.surrogate)) throw ConfigError("unknown surrogate '" + madp_training.surrogate + "'");
    if (recmae_training.batch_size == 0) throw ConfigError("recmae_training.batch_size must be positive");
  }

  kriging::KrigeOptions krige_options() const {
    return {scenario.cell_x_m, scenario.cell_y_m, scenario.decorrelation_m, 1e-8};
  }
};

/// Full scale: 64×64 grid of 4 m cells, 16 frames per slot, 10 slots.
inline RunConfig full_profile() {
  RunConfig c;
  c.profile = "full";
  c.madp.encoder.feature_patch = 8;
  c.sync();
  return c;
}

/// Laptop scale: 16×16 grid of 16 m cells, 4 frames per slot, 6 slots.
inline RunConfig desk_profile() {
  RunConfig c;
  c.profile = "desk";
  c.scenario.rows = 16;
  c.scenario.cols = 16;
  c.scenario.cell_x_m = 16.0;
  c.scenario.cell_y_m = 16.0;
  c.scenario.frames_per_slot = 4;
  c.scenario.slots = 6;
  c.recmae.tubelet = {2, 4, 4};
  c.recmae.embed_dim = 32;
  c.recmae.encoder_depth = 2;
  c.recmae.decoder_depth = 2;
  c.recmae.heads = 2;
  c.recmae_training.batch_size = 2;
  c.recmae_training.learning_rate = 2e-3;
  c.recmae_training.repeats = 32;
  c.recmae_training.warmup_epochs = 5;
  c.recmae_training.cosine_decay = true;
  c.env.agents = 2;
  c.env.static_spacing = 8;
  c.madp.encoder.feature_patch = 4;
  c.madp.critic_lr = 3e-3;
  c.sync();
  return c;
}

inline RunConfig profile(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "full") return full_profile();
  throw ConfigError("unknown profile '" + name + "' (expected desk or full)");
}

namespace detail {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  Section child(const char* key) {
    seen_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : empty(), path_ + "." + key);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown configuration key " + path_ + "." + item.key());
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Io>
void fields(RunConfig& c, Io&& io) {
  auto& s = c.scenario;
  io("scenario", "area_x_m", s.area_x_m);
  io("scenario", "area_y_m", s.area_y_m);
  io("scenario", "cell_x_m", s.cell_x_m);
  io("scenario", "cell_y_m", s.cell_y_m);
  io("scenario", "rows", s.rows);
  io("scenario", "cols", s.cols);
  io("scenario", "sensor_height_m", s.sensor_height_m);
  io("scenario", "carrier_hz", s.carrier_hz);
  io("scenario", "tx_power_dbm", s.tx_power_dbm);
  io("scenario", "ue_min", s.ue_min);
  io("scenario", "ue_max", s.ue_max);
  io("scenario", "frames_per_slot", s.frames_per_slot);
  io("scenario", "slots", s.slots);
  io("scenario", "a_los", s.a_los);
  io("scenario", "b_los", s.b_los);
  io("scenario", "n_los", s.n_los);
  io("scenario", "n_nlos", s.n_nlos);
  io("scenario", "shadow_std_db", s.shadow_std_db);
  io("scenario", "decorrelation_m", s.decorrelation_m);
  io("scenario", "reference_m", s.reference_m);
  io("scenario", "frame_interval_s", s.frame_interval_s);
  io("scenario", "speed_min", s.speed_min);
  io("scenario", "speed_max", s.speed_max);
  io("scenario", "road_half_width_m", s.road_half_width_m);

  auto& r = c.recmae;
  io("recmae", "tubelet_t", r.tubelet.t);
  io("recmae", "tubelet_h", r.tubelet.h);
  io("recmae", "tubelet_w", r.tubelet.w);
  io("recmae", "embed_dim", r.embed_dim);
  io("recmae", "encoder_depth", r.encoder_depth);
  io("recmae", "decoder_depth", r.decoder_depth);
  io("recmae", "heads", r.heads);
  io("recmae", "ffn_expansion", r.ffn_expansion);
  io("recmae", "patch_mask_ratio", r.patch_mask_ratio);
  io("recmae", "pixel_mask_ratio", r.pixel_mask_ratio);
  io("recmae", "pe_base", r.pe_base);
  io("recmae", "init_std", r.init_std);
  io("recmae", "masked_only_loss", r.masked_only_loss);
  io("recmae", "structured_mask_prob", r.structured_mask_prob);
  io("recmae", "epochs", c.recmae_training.epochs);
  io("recmae", "batch_size", c.recmae_training.batch_size);
  io("recmae", "learning_rate", c.recmae_training.learning_rate);
  io("recmae", "repeats", c.recmae_training.repeats);
  io("recmae", "warmup_epochs", c.recmae_training.warmup_epochs);
  io("recmae", "cosine_decay", c.recmae_training.cosine_decay);
  io("recmae", "max_stacks", c.recmae_training.max_stacks);
  io("recmae", "inference_draws", c.recmae_training.inference_draws);

  auto& e = c.env;
  io("env", "agents", e.agents);
  io("env", "static_spacing", e.static_spacing);
  io("env", "max_move", e.max_move);
  io("env", "history", e.history);
  io("env", "reward_offset", e.reward_offset);

  auto& m = c.madp;
  io("madp", "episodes", c.madp_training.episodes);
  io("madp", "surrogate", c.madp_training.surrogate);
  io("madp", "diffusion_steps", m.diffusion_steps);
  io("madp", "alpha_first", m.alpha_first);
  io("madp", "alpha_last", m.alpha_last);
  io("madp", "gamma", m.gamma);
  io("madp", "tau", m.tau);
  io("madp", "buffer_capacity", m.buffer_capacity);
  io("madp", "batch_size", m.batch_size);
  io("madp", "actor_lr", m.actor_lr);
  io("madp", "critic_lr", m.critic_lr);
  io("madp", "exploration_start", m.exploration_start);
  io("madp", "exploration_fraction", m.exploration_fraction);
  io("madp", "lr_decay_start", m.lr_decay_start);
  io("madp", "reward_shift", m.reward_shift);
  io("madp", "bound_penalty", m.bound_penalty);
  io("madp", "denoiser_width", m.denoiser_width);
  io("madp", "step_dim", m.step_dim);
  io("madp", "critic_width", m.critic_width);
  io("madp", "feature_patch", m.encoder.feature_patch);
  io("madp", "patch_features", m.encoder.patch_features);
  io("madp", "embed", m.encoder.embed);
}

}  // namespace detail

inline json to_json(const RunConfig& cfg) {
  RunConfig c = cfg;
  json j = {{"profile", c.profile}, {"seed", c.seed}};
  detail::fields(c, [&](const char* section, const char* key, auto& value) { j[section][key] = value; });
  j["env"]["move_mode"] = c.env.move_mode == cartoenv::MoveMode::Chebyshev ? "chebyshev" : "single_axis";
  return j;
}

/// Starts from the named profile (default desk) and overlays every present
/// key. Unknown keys anywhere are rejected.
inline RunConfig from_json(const json& j) {
  detail::Section root(j, "config");
  std::string name = "desk";
  root.get("profile", name);
  RunConfig c = profile(name);
  root.get("seed", c.seed);
  std::map<std::string, detail::Section> sections;
  for (const char* s : {"scenario", "recmae", "env", "madp"}) sections.emplace(s, root.child(s));
  detail::fields(c, [&](const char* section, const char* key, auto& value) { sections.at(section).get(key, value); });
  std::string move = c.env.move_mode == cartoenv::MoveMode::Chebyshev ? "chebyshev" : "single_axis";
  sections.at("env").get("move_mode", move);
  if (move == "chebyshev") {
    c.env.move_mode = cartoenv::MoveMode::Chebyshev;
  } else if (move == "single_axis") {
    c.env.move_mode = cartoenv::MoveMode::SingleAxis;
  } else {
    throw ConfigError("env.move_mode must be chebyshev or single_axis");
  }
  for (const auto& [_, s] : sections) s.finish();
  root.finish();
  c.sync();
  c.validate();
  return c;
}

}  // namespace rmap::config
