#pragma once

// Multi-agent diffusion policy. Every agent owns a conditional DDPM actor
// (temporal-attention encoder + noise-predicting denoiser) and a centralized
// critic; training follows the MADDPG pattern with target networks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmap/cartoenv.hpp"
#include "rmap/nn.hpp"
#include "rmap/optim.hpp"
#include "rmap/tensor.hpp"

namespace rmap::madp {

inline constexpr std::size_t kActionDim = 2;

struct DiffusionSchedule {
  std::vector<double> alpha;      // alpha[n-1] for step n
  std::vector<double> alpha_bar;  // cumulative products

  std::size_t steps() const { return alpha.size(); }

  static DiffusionSchedule from_alphas(std::vector<double> alphas) {
    if (alphas.empty()) throw std::invalid_argument("diffusion schedule needs at least one step");
    DiffusionSchedule s;
    double running = 1.0;
    for (double a : alphas) {
      if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("diffusion schedule: alpha must lie in (0, 1]");
      running *= a;
      s.alpha_bar.push_back(running);
    }
    s.alpha = std::move(alphas);
    return s;
  }

  /// alpha_n linear from `first` (n = 1) to `last` (n = steps).
  static DiffusionSchedule linear(std::size_t steps = 6, double first = 0.98, double last = 0.80) {
    std::vector<double> alphas;
    for (std::size_t i = 0; i < steps; ++i) {
      const double t = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      alphas.push_back(first + (last - first) * t);
    }
    return from_alphas(std::move(alphas));
  }

  double a(std::size_t n) const { return alpha.at(n - 1); }
  double abar(std::size_t n) const { return alpha_bar.at(n - 1); }
};

/// x_n = sqrt(abar_n)·x0 + sqrt(1 - abar_n)·eps.
inline std::vector<double> forward_diffuse(const std::vector<double>& x0, std::size_t n,
                                           const DiffusionSchedule& schedule, const std::vector<double>& noise) {
  if (n < 1 || n > schedule.steps()) throw std::out_of_range("forward_diffuse: step out of range");
  if (noise.size() != x0.size()) throw DimensionError("forward_diffuse: noise size mismatch");
  const double ab = schedule.abar(n);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = std::sqrt(ab) * x0[i] + std::sqrt(1.0 - ab) * noise[i];
  return out;
}

// ---------------------------------------------------------------------------
// Temporal-attention state encoder

struct EncoderConfig {
  std::size_t rows = 16;
  std::size_t cols = 16;
  std::size_t channels = cartoenv::kObservationChannels;
  std::size_t feature_patch = 4;
  std::size_t patch_features = 8;
  std::size_t embed = 32;
  std::size_t history = 4;

  std::size_t patches() const { return (rows / feature_patch) * (cols / feature_patch); }
  std::size_t patch_length() const { return channels * feature_patch * feature_patch; }
};

/// Constant encoder inputs for a batch of observation histories. Histories
/// are left-aligned (oldest first) and padded to the configured length;
/// padded slots are excluded from attention keys and from pooling.
struct HistoryBatch {
  std::size_t batch = 0;
  Tensor patches;      // [B·K, P, C·p·p]
  Tensor key_mask;     // [B, K, K] additive
  Tensor pool;         // [B, 1, K]
  Tensor positions;    // [K, E]
};

inline HistoryBatch make_history_batch(const std::vector<const cartoenv::Observation*>& obs, const EncoderConfig& cfg) {
  if (obs.empty()) throw std::invalid_argument("history batch: no observations");
  if (cfg.rows % cfg.feature_patch || cfg.cols % cfg.feature_patch) {
    throw std::invalid_argument("history batch: grid not divisible by the feature patch");
  }
  const std::size_t k = cfg.history;
  const std::size_t p = cfg.feature_patch;
  const std::size_t plen = cfg.patch_length();
  const std::size_t np = cfg.patches();
  const std::size_t plane = cfg.rows * cfg.cols;
  const std::size_t b = obs.size();
  std::vector<double> patches(b * k * np * plen, 0.0);
  std::vector<double> mask(b * k * k, 0.0);
  std::vector<double> pool(b * k, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& hist = obs[i]->history;
    if (hist.empty()) throw std::invalid_argument("history batch: empty history");
    if (obs[i]->rows != cfg.rows || obs[i]->cols != cfg.cols) {
      throw std::invalid_argument("history batch: observation grid does not match encoder config");
    }
    const std::size_t len = std::min(hist.size(), k);
    const std::size_t skip = hist.size() - len;
    for (std::size_t t = 0; t < len; ++t) {
      const auto& frame = hist[skip + t];
      double* dst = patches.data() + (i * k + t) * np * plen;
      for (std::size_t pr = 0; pr < cfg.rows / p; ++pr)
        for (std::size_t pc = 0; pc < cfg.cols / p; ++pc) {
          double* token = dst + (pr * (cfg.cols / p) + pc) * plen;
          std::size_t j = 0;
          for (std::size_t ch = 0; ch < cfg.channels; ++ch)
            for (std::size_t dr = 0; dr < p; ++dr)
              for (std::size_t dc = 0; dc < p; ++dc)
                token[j++] = frame[ch * plane + (pr * p + dr) * cfg.cols + pc * p + dc];
        }
      pool[i * k + t] = 1.0 / static_cast<double>(len);
    }
    for (std::size_t q = 0; q < k; ++q)
      for (std::size_t key = len; key < k; ++key) mask[(i * k + q) * k + key] = -1e9;
  }
  HistoryBatch hb;
  hb.batch = b;
  hb.patches = Tensor({b * k, np, plen}, std::move(patches));
  hb.key_mask = Tensor({b, k, k}, std::move(mask));
  hb.pool = Tensor({b, 1, k}, std::move(pool));
  hb.positions = nn::positional_table(k, cfg.embed);
  return hb;
}

struct TemporalEncoder {
  EncoderConfig cfg;
  nn::Linear patch_proj;  // strided patch features
  nn::Linear frame_proj;
  nn::Linear query;
  nn::Linear key;
  nn::Linear value;

  static TemporalEncoder init(const EncoderConfig& cfg, std::mt19937_64& rng) {
    const double s_patch = 1.0 / std::sqrt(static_cast<double>(cfg.patch_length()));
    const double s_frame = 1.0 / std::sqrt(static_cast<double>(cfg.patches() * cfg.patch_features));
    const double s_attn = 1.0 / std::sqrt(static_cast<double>(cfg.embed));
    return {cfg,
            nn::Linear::init(cfg.patch_length(), cfg.patch_features, rng, s_patch),
            nn::Linear::init(cfg.patches() * cfg.patch_features, cfg.embed, rng, s_frame),
            nn::Linear::init(cfg.embed, cfg.embed, rng, s_attn),
            nn::Linear::init(cfg.embed, cfg.embed, rng, s_attn),
            nn::Linear::init(cfg.embed, cfg.embed, rng, s_attn)};
  }

  /// Per-frame vectors before attention: [B, K, E].
  Tensor frame_vectors(const HistoryBatch& in) const {
    const std::size_t bk = in.batch * cfg.history;
    Tensor feats = gelu(patch_proj(in.patches));
    Tensor frames = gelu(frame_proj(reshape(feats, {bk, cfg.patches() * cfg.patch_features})));
    return add(reshape(frames, {in.batch, cfg.history, cfg.embed}), in.positions);
  }

  /// Self-attention over the frame vectors, mean-pooled: [B, E].
  Tensor attend(const Tensor& tokens, const HistoryBatch& in) const {
    Tensor att = nn::scaled_dot_attention(query(tokens), key(tokens), value(tokens), &in.key_mask);
    return reshape(matmul(in.pool, att), {in.batch, cfg.embed});
  }

  Tensor operator()(const HistoryBatch& in) const { return attend(frame_vectors(in), in); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    patch_proj.visit(nn::join(prefix, "patch_proj"), f);
    frame_proj.visit(nn::join(prefix, "frame_proj"), f);
    query.visit(nn::join(prefix, "query"), f);
    key.visit(nn::join(prefix, "key"), f);
    value.visit(nn::join(prefix, "value"), f);
  }
};

// ---------------------------------------------------------------------------
// Actor

struct Denoiser {
  nn::Linear input;
  nn::Linear hidden;
  nn::Linear output;
  std::size_t step_dim = 8;

  static Denoiser init(std::size_t embed, std::size_t width, std::size_t step_dim, std::mt19937_64& rng) {
    const std::size_t in = kActionDim + embed + step_dim;
    return {nn::Linear::init(in, width, rng, 1.0 / std::sqrt(static_cast<double>(in))),
            nn::Linear::init(width, width, rng, 1.0 / std::sqrt(static_cast<double>(width))),
            nn::Linear::init(width, kActionDim, rng, 0.1 / std::sqrt(static_cast<double>(width))), step_dim};
  }

  /// Predicted noise for noisy actions x [B, 2] at step n under condition h.
  Tensor operator()(const Tensor& x, const Tensor& h, std::size_t n) const {
    const std::size_t b = x.dim(0);
    const std::vector<double> pe = nn::positional_encoding(n, step_dim);
    std::vector<double> steps;
    steps.reserve(b * step_dim);
    for (std::size_t i = 0; i < b; ++i) steps.insert(steps.end(), pe.begin(), pe.end());
    Tensor in = concat_cols({x, h, Tensor({b, step_dim}, std::move(steps))});
    return output(gelu(hidden(gelu(input(in)))));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    input.visit(nn::join(prefix, "input"), f);
    hidden.visit(nn::join(prefix, "hidden"), f);
    output.visit(nn::join(prefix, "output"), f);
  }
};

struct Actor {
  TemporalEncoder encoder;
  Denoiser denoiser;
  std::shared_ptr<std::size_t> denoiser_calls = std::make_shared<std::size_t>(0);

  Tensor predict_noise(const Tensor& x, const Tensor& h, std::size_t n) const {
    ++*denoiser_calls;
    return denoiser(x, h, n);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    encoder.visit(nn::join(prefix, "encoder"), f);
    denoiser.visit(nn::join(prefix, "denoiser"), f);
  }
};

/// Gaussian draws for one reverse chain over a batch: the starting point x_T
/// and the injected noise of every step (zero at the final step).
struct ChainNoise {
  Tensor start;                 // [B, 2]
  std::vector<Tensor> injected; // injected[n-1] for step n
};

inline ChainNoise draw_chain_noise(std::size_t batch, const DiffusionSchedule& schedule, std::mt19937_64& rng) {
  ChainNoise noise;
  noise.start = Tensor::randn({batch, kActionDim}, rng);
  noise.injected.resize(schedule.steps());
  noise.injected[0] = Tensor({batch, kActionDim}, 0.0);
  for (std::size_t n = schedule.steps(); n >= 2; --n) noise.injected[n - 1] = Tensor::randn({batch, kActionDim}, rng);
  return noise;
}

/// Reverse chain from x_T to x_0 (unclamped):
/// x_{n-1} = (x_n - (1 - a_n)/sqrt(1 - abar_n)·eps(x_n, h, n)) / sqrt(a_n) + sqrt(1 - a_n)·z_n.
inline Tensor denoise_chain(const Actor& actor, const Tensor& condition, const ChainNoise& noise,
                            const DiffusionSchedule& schedule) {
  Tensor x = noise.start;
  for (std::size_t n = schedule.steps(); n >= 1; --n) {
    const double a = schedule.a(n);
    const double coef = (1.0 - a) / std::sqrt(std::max(1.0 - schedule.abar(n), 1e-12));
    Tensor eps = actor.predict_noise(x, condition, n);
    x = scale(sub(x, scale(eps, coef)), 1.0 / std::sqrt(a));
    if (n > 1) x = add(x, scale(noise.injected[n - 1], std::sqrt(1.0 - a)));
  }
  return x;
}

/// Actions for a batch of histories, clamped to [-1, 1]².
inline Tensor sample_actions(const Actor& actor, const HistoryBatch& histories, const DiffusionSchedule& schedule,
                             std::mt19937_64& rng) {
  const Tensor h = actor.encoder(histories);
  return clamp(denoise_chain(actor, h, draw_chain_noise(histories.batch, schedule, rng), schedule), -1.0, 1.0);
}

inline cartoenv::Action sample_action(const cartoenv::Observation& obs, const Actor& actor,
                                      const DiffusionSchedule& schedule, std::mt19937_64& rng) {
  TapeScope no_tape(nullptr);
  const Tensor a = sample_actions(actor, make_history_batch({&obs}, actor.encoder.cfg), schedule, rng);
  return {a[0], a[1]};
}

/// Mean ||eps - eps_theta(sqrt(abar_n)·x0 + sqrt(1 - abar_n)·eps, c, n)||² with
/// n uniform over the schedule and eps standard normal. `predict` receives
/// (noisy actions [B, 2], n) and returns predicted noise.
inline Tensor diffusion_noise_loss(const Tensor& x0, const std::function<Tensor(const Tensor&, std::size_t)>& predict,
                                   const DiffusionSchedule& schedule, std::mt19937_64& rng) {
  if (x0.ndim() != 2 || x0.dim(0) == 0) throw DimensionError("diffusion_noise_loss: expects [B, 2] actions");
  std::uniform_int_distribution<std::size_t> step(1, schedule.steps());
  const std::size_t n = step(rng);
  Tensor eps = Tensor::randn(x0.shape(), rng);
  Tensor noisy = add(scale(x0, std::sqrt(schedule.abar(n))), scale(eps, std::sqrt(1.0 - schedule.abar(n))));
  Tensor diff = sub(eps, predict(noisy, n));
  return scale(sum(square(diff)), 1.0 / static_cast<double>(x0.dim(0)));
}

// ---------------------------------------------------------------------------
// Critic

inline std::size_t& critic_evaluations() {
  static std::size_t count = 0;
  return count;
}

struct Critic {
  TemporalEncoder encoder;
  nn::Linear input;
  nn::Linear hidden;
  nn::Linear output;
  std::size_t agents = 1;

  static Critic init(const EncoderConfig& enc, std::size_t agents, std::size_t width, std::mt19937_64& rng) {
    const std::size_t in = agents * (enc.embed + kActionDim);
    return {TemporalEncoder::init(enc, rng),
            nn::Linear::init(in, width, rng, 1.0 / std::sqrt(static_cast<double>(in))),
            nn::Linear::init(width, width, rng, 1.0 / std::sqrt(static_cast<double>(width))),
            nn::Linear::init(width, 1, rng, 1.0 / std::sqrt(static_cast<double>(width))), agents};
  }

  /// Q for joint observations (one history batch per agent) and joint
  /// actions (one [B, 2] tensor per agent): [B, 1].
  Tensor operator()(const std::vector<HistoryBatch>& observations, const std::vector<Tensor>& actions) const {
    if (observations.size() != agents || actions.size() != agents) {
      throw DimensionError("critic: expected inputs for " + std::to_string(agents) + " agents");
    }
    ++critic_evaluations();
    std::vector<Tensor> parts;
    for (const HistoryBatch& o : observations) parts.push_back(encoder(o));
    for (const Tensor& a : actions) parts.push_back(a);
    return output(gelu(hidden(gelu(input(concat_cols(parts))))));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    encoder.visit(nn::join(prefix, "encoder"), f);
    input.visit(nn::join(prefix, "input"), f);
    hidden.visit(nn::join(prefix, "hidden"), f);
    output.visit(nn::join(prefix, "output"), f);
  }
};

/// y = r + gamma·(1 - done)·Q_next.
inline double critic_target(double reward, double gamma, bool done, double q_next) {
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("critic_target: gamma must lie in [0, 1)");
  return reward + (done ? 0.0 : gamma * q_next);
}

// ---------------------------------------------------------------------------
// Replay

struct Transition {
  std::vector<cartoenv::Observation> observations;
  std::vector<cartoenv::Action> actions;
  double reward = 0.0;
  std::vector<cartoenv::Observation> next_observations;
  bool done = false;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
  }

  void push(Transition t) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(t));
    } else {
      items_[next_] = std::move(t);
    }
    next_ = (next_ + 1) % capacity_;
  }

  std::vector<std::size_t> sample_indices(std::size_t count, std::mt19937_64& rng) const {
    if (items_.empty()) throw std::logic_error("replay buffer is empty");
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    std::vector<std::size_t> out(count);
    for (std::size_t& i : out) i = pick(rng);
    return out;
  }

  std::vector<const Transition*> sample(std::size_t count, std::mt19937_64& rng) const {
    std::vector<const Transition*> out;
    for (std::size_t i : sample_indices(count, rng)) out.push_back(&items_[i]);
    return out;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return items_.at(i); }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Transition> items_;
};

// ---------------------------------------------------------------------------
// Learner

struct MadpHyper {
  std::size_t diffusion_steps = 6;
  double alpha_first = 0.98;
  double alpha_last = 0.80;
  double gamma = 0.95;
  double tau = 0.01;
  std::size_t buffer_capacity = 100000;
  std::size_t batch_size = 64;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  double exploration_start = 0.5;   // Gaussian action-noise std at episode 0
  double exploration_fraction = 0.25;
  double lr_decay_start = 0.65;     // fraction of episodes after which learning rates decay linearly to 0
  double reward_shift = 30.0;       // critics learn on (reward - shift)
  double bound_penalty = 1.0;       // actor penalty on pre-clamp excursions beyond [-1, 1]
  std::size_t denoiser_width = 64;
  std::size_t step_dim = 8;
  std::size_t critic_width = 64;
  EncoderConfig encoder{};
};

struct MadpAgents {
  DiffusionSchedule schedule;
  std::vector<Actor> actors;
  std::vector<Actor> target_actors;
  std::vector<Critic> critics;
  std::vector<Critic> target_critics;
  std::vector<AdamState> actor_opt;
  std::vector<AdamState> critic_opt;

  static MadpAgents init(std::size_t agents, const MadpHyper& hp, std::mt19937_64& rng) {
    MadpAgents m;
    m.schedule = DiffusionSchedule::linear(hp.diffusion_steps, hp.alpha_first, hp.alpha_last);
    for (std::size_t i = 0; i < agents; ++i) {
      Actor actor{TemporalEncoder::init(hp.encoder, rng), Denoiser::init(hp.encoder.embed, hp.denoiser_width, hp.step_dim, rng)};
      Critic critic = Critic::init(hp.encoder, agents, hp.critic_width, rng);
      m.target_actors.push_back(nn::deep_copy(actor));
      m.target_actors.back().denoiser_calls = std::make_shared<std::size_t>(0);
      m.target_critics.push_back(nn::deep_copy(critic));
      m.actors.push_back(std::move(actor));
      m.critics.push_back(std::move(critic));
      AdamState a;
      a.hyper.learning_rate = hp.actor_lr;
      AdamState c;
      c.hyper.learning_rate = hp.critic_lr;
      m.actor_opt.push_back(a);
      m.critic_opt.push_back(c);
    }
    return m;
  }

  std::size_t agents() const { return actors.size(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < actors.size(); ++i) {
      actors[i].visit(nn::join(prefix, "actor." + std::to_string(i)), f);
      critics[i].visit(nn::join(prefix, "critic." + std::to_string(i)), f);
      target_actors[i].visit(nn::join(prefix, "target_actor." + std::to_string(i)), f);
      target_critics[i].visit(nn::join(prefix, "target_critic." + std::to_string(i)), f);
    }
  }
};

/// Per-agent history batches for a minibatch, from current or next observations.
inline std::vector<HistoryBatch> joint_histories(const std::vector<const Transition*>& batch, bool next,
                                                 std::size_t agents, const EncoderConfig& cfg) {
  std::vector<HistoryBatch> out;
  for (std::size_t i = 0; i < agents; ++i) {
    std::vector<const cartoenv::Observation*> obs;
    for (const Transition* t : batch) obs.push_back(next ? &t->next_observations.at(i) : &t->observations.at(i));
    out.push_back(make_history_batch(obs, cfg));
  }
  return out;
}

inline std::vector<Tensor> joint_actions(const std::vector<const Transition*>& batch, std::size_t agents) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < agents; ++i) {
    std::vector<double> v;
    for (const Transition* t : batch) {
      v.push_back(t->actions.at(i)[0]);
      v.push_back(t->actions.at(i)[1]);
    }
    out.push_back(Tensor({batch.size(), kActionDim}, std::move(v)));
  }
  return out;
}

/// Target-actor next actions for every agent (no gradient).
inline std::vector<Tensor> target_next_actions(const MadpAgents& m, const std::vector<HistoryBatch>& next_obs,
                                               std::mt19937_64& rng) {
  TapeScope no_tape(nullptr);
  std::vector<Tensor> out;
  for (std::size_t j = 0; j < m.agents(); ++j) out.push_back(sample_actions(m.target_actors[j], next_obs[j], m.schedule, rng));
  return out;
}

/// Mean squared error between critic i and bootstrapped targets
/// y = (r - shift) + gamma·(1 - done)·Q'_i(o', a'), followed by one Adam step.
inline double update_critic(MadpAgents& m, std::size_t agent, const std::vector<const Transition*>& batch,
                            const std::vector<HistoryBatch>& obs, const std::vector<HistoryBatch>& next_obs,
                            const std::vector<Tensor>& next_actions, const MadpHyper& hp) {
  std::vector<double> targets(batch.size());
  {
    TapeScope no_tape(nullptr);
    const Tensor q_next = m.target_critics[agent](next_obs, next_actions);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      targets[b] = critic_target(batch[b]->reward - hp.reward_shift, hp.gamma, batch[b]->done, q_next[b]);
    }
  }
  std::vector<Tensor> params = nn::parameter_tensors(m.critics[agent]);
  Tape tape;
  double loss_value = 0.0;
  {
    TapeScope scope(tape);
    const Tensor q = m.critics[agent](obs, joint_actions(batch, m.agents()));
    const Tensor loss = mean(square(sub(q, Tensor({batch.size(), 1}, targets))));
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw NumericalError("update_critic: non-finite loss");
    zero_grads(params);
    backward(tape, loss);
  }
  adam_step(params, m.critic_opt[agent]);
  zero_grads(params);
  return loss_value;
}

/// One actor step maximizing q_fn(regenerated own action). The action is
/// produced by the full reverse chain with frozen noise draws so gradients
/// flow through every denoising step. Returns -mean Q.
inline double actor_objective_step(Actor& actor, AdamState& opt, const HistoryBatch& histories,
                                   const DiffusionSchedule& schedule, std::mt19937_64& rng,
                                   const std::function<Tensor(const Tensor&)>& q_fn, double bound_penalty) {
  std::vector<Tensor> params = nn::parameter_tensors(actor);
  const ChainNoise noise = draw_chain_noise(histories.batch, schedule, rng);
  Tape tape;
  double objective = 0.0;
  {
    TapeScope scope(tape);
    const Tensor raw = denoise_chain(actor, actor.encoder(histories), noise, schedule);
    const Tensor action = clamp(raw, -1.0, 1.0);
    const Tensor q_mean = mean(q_fn(action));
    objective = -q_mean.item();
    Tensor loss = scale(q_mean, -1.0);
    if (bound_penalty > 0.0) {
      const Tensor excess = relu(add_scalar(square(raw), -1.0));
      loss = add(loss, scale(mean(excess), bound_penalty));
    }
    if (!std::isfinite(loss.item())) throw NumericalError("update_actor: non-finite loss");
    zero_grads(params);
    backward(tape, loss);
  }
  adam_step(params, opt);
  zero_grads(params);
  return objective;
}

/// Actor i maximizes its critic with the other agents' actions taken from the
/// batch; only actor i's parameters change.
inline double update_actor(MadpAgents& m, std::size_t agent, const std::vector<const Transition*>& batch,
                           const std::vector<HistoryBatch>& obs, const MadpHyper& hp, std::mt19937_64& rng) {
  std::vector<Tensor> actions = joint_actions(batch, m.agents());
  const Critic& critic = m.critics[agent];
  auto q_fn = [&](const Tensor& own) {
    std::vector<Tensor> joint = actions;
    joint[agent] = own;
    return critic(obs, joint);
  };
  const double value = actor_objective_step(m.actors[agent], m.actor_opt[agent], obs[agent], m.schedule, rng, q_fn,
                                            hp.bound_penalty);
  std::vector<Tensor> critic_params = nn::parameter_tensors(m.critics[agent]);
  zero_grads(critic_params);
  return value;
}

using EpisodeFactory = std::function<std::vector<FrameStack>(std::size_t episode)>;

struct EpisodeStats {
  std::size_t episode = 0;
  double total_reward = 0.0;
  double cumulative_error = 0.0;
  double critic_loss = 0.0;
  double actor_objective = 0.0;
};

struct TrainResult {
  MadpAgents agents;
  std::vector<EpisodeStats> history;
};

/// Centralized training: roll out joint actions with annealed Gaussian
/// exploration, store transitions, and after every environment step update
/// each critic, then each actor, then soft-update all target networks.
inline TrainResult train_madp(const cartoenv::EnvConfig& env_cfg, const cartoenv::Reconstructor& reconstructor,
                              const EpisodeFactory& episodes, std::size_t episode_count, const MadpHyper& hp,
                              std::uint64_t seed, const std::function<void(const EpisodeStats&)>& on_episode = {}) {
  std::mt19937_64 rng(seed);
  TrainResult result{MadpAgents::init(env_cfg.agents, hp, rng), {}};
  MadpAgents& m = result.agents;
  ReplayBuffer buffer(hp.buffer_capacity);
  cartoenv::Environment env(env_cfg, reconstructor);
  std::normal_distribution<double> normal;

  for (std::size_t ep = 0; ep < episode_count; ++ep) {
    const double progress = static_cast<double>(ep) / static_cast<double>(std::max<std::size_t>(episode_count, 1));
    const double explore =
        hp.exploration_fraction > 0.0 ? hp.exploration_start * std::max(0.0, 1.0 - progress / hp.exploration_fraction) : 0.0;
    double lr_scale = 1.0;
    if (progress > hp.lr_decay_start && hp.lr_decay_start < 1.0) {
      lr_scale = std::max(0.0, 1.0 - (progress - hp.lr_decay_start) / (1.0 - hp.lr_decay_start));
    }
    for (std::size_t i = 0; i < m.agents(); ++i) {
      m.actor_opt[i].hyper.learning_rate = hp.actor_lr * lr_scale;
      m.critic_opt[i].hyper.learning_rate = hp.critic_lr * lr_scale;
    }

    EpisodeStats stats;
    stats.episode = ep;
    std::vector<cartoenv::Observation> obs = env.reset(episodes(ep), rng());
    std::size_t updates = 0;
    while (!env.done()) {
      std::vector<cartoenv::Action> actions;
      for (std::size_t i = 0; i < m.agents(); ++i) {
        cartoenv::Action a = sample_action(obs[i], m.actors[i], m.schedule, rng);
        for (double& v : a) v = std::clamp(v + explore * normal(rng), -1.0, 1.0);
        actions.push_back(a);
      }
      cartoenv::StepResult step = env.step(actions);
      stats.total_reward += step.reward;
      stats.cumulative_error += step.mse;
      buffer.push({obs, actions, step.reward, step.observations, step.done});
      obs = std::move(step.observations);

      if (buffer.size() < std::min(hp.batch_size, hp.buffer_capacity)) continue;
      const auto batch = buffer.sample(hp.batch_size, rng);
      const auto cur = joint_histories(batch, false, m.agents(), hp.encoder);
      const auto nxt = joint_histories(batch, true, m.agents(), hp.encoder);
      const auto next_actions = target_next_actions(m, nxt, rng);
      for (std::size_t i = 0; i < m.agents(); ++i) {
        stats.critic_loss += update_critic(m, i, batch, cur, nxt, next_actions, hp);
        stats.actor_objective += update_actor(m, i, batch, cur, hp, rng);
        nn::soft_update(m.actors[i], m.target_actors[i], hp.tau);
        nn::soft_update(m.critics[i], m.target_critics[i], hp.tau);
      }
      ++updates;
    }
    if (updates > 0) {
      stats.critic_loss /= static_cast<double>(updates * m.agents());
      stats.actor_objective /= static_cast<double>(updates * m.agents());
    }
    result.history.push_back(stats);
    if (on_episode) on_episode(stats);
  }
  return result;
}

struct ExecutionResult {
  std::vector<cartoenv::SlotTrace> trace;
  std::vector<double> slot_errors;
  double cumulative_error = 0.0;
  double total_reward = 0.0;
};

/// Decentralized execution: each agent acts on its own observation history
/// only. Critics are never consulted.
inline ExecutionResult execute_policy(cartoenv::Environment& env, std::vector<FrameStack> episode,
                                      const std::vector<Actor>& actors, const DiffusionSchedule& schedule,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<cartoenv::Observation> obs = env.reset(std::move(episode), rng());
  if (actors.size() != obs.size()) throw std::invalid_argument("execute_policy: one actor per agent required");
  ExecutionResult out;
  while (!env.done()) {
    std::vector<cartoenv::Action> actions;
    for (std::size_t i = 0; i < actors.size(); ++i) actions.push_back(sample_action(obs[i], actors[i], schedule, rng));
    cartoenv::StepResult step = env.step(actions);
    out.slot_errors.push_back(step.mse);
    out.total_reward += step.reward;
    obs = std::move(step.observations);
  }
  out.trace = env.trace();
  out.cumulative_error = sensing::cumulative_error(out.slot_errors);
  return out;
}

/// Baseline with uniformly random actions.
inline ExecutionResult execute_random(cartoenv::Environment& env, std::vector<FrameStack> episode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  env.reset(std::move(episode), rng());
  ExecutionResult out;
  while (!env.done()) {
    cartoenv::StepResult step = env.step(cartoenv::random_actions(env.config().agents, rng));
    out.slot_errors.push_back(step.mse);
    out.total_reward += step.reward;
  }
  out.trace = env.trace();
  out.cumulative_error = sensing::cumulative_error(out.slot_errors);
  return out;
}

}  // namespace rmap::madp
